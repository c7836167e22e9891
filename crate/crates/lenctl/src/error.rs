//! Crate-wide error type.

use crate::scp::StandardControlPrompt;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid standard control prompt: {0}")]
    InvalidScp(String),

    #[error("not a canonical control prompt: {0:?}")]
    ScpParseFailure(String),

    #[error("ambiguous length instruction; candidates: {}",
        .candidates.iter().map(|c| format!("\"{c}\"")).collect::<Vec<_>>().join(", "))]
    AmbiguousInstruction {
        candidates: Vec<StandardControlPrompt>,
    },

    #[error("template error: {0}")]
    Template(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("missing prerequisite {artifact}; produce it with `{producer}` first")]
    MissingPrerequisite { artifact: String, producer: String },

    #[error("template leakage: {0}")]
    TemplateLeakage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("lock error: {0}")]
    Lock(String),

    #[error("{context}: {source}")]
    IoContext {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit-code class: user errors map to 1, internal errors to 2.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::Graph(_) | Error::NonFiniteGradient { .. } | Error::Diverged(_)
        )
    }
}

pub(crate) trait IoContextExt<T> {
    fn io_context(self, context: impl Into<String>) -> Result<T>;
}

impl<T> IoContextExt<T> for std::result::Result<T, std::io::Error> {
    fn io_context(self, context: impl Into<String>) -> Result<T> {
        self.map_err(|source| Error::IoContext {
            context: context.into(),
            source,
        })
    }
}
