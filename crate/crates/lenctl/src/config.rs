//! Run configuration: a versioned, sectioned key-value file (TOML).
//! Unknown keys are rejected; a snapshot is written into every run
//! directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContextExt, Result};
use crate::infer::InferenceConfig;
use crate::nn::model::ModelDims;
use crate::ppo::PpoConfig;
use crate::sft::SftConfig;
use crate::spe::extractor::ExtractorConfig;
use crate::templates::SyntheticCorpusParams;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub corpus: CorpusSection,
    pub templates: TemplatesSection,
    pub model: ModelSection,
    pub spe: ExtractorConfig,
    pub sft: SftConfig,
    pub ppo: PpoConfig,
    pub inference: InferenceConfig,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSection {
    /// `synthetic` generates articles/summaries; `ingest` reads a JSONL
    /// file of `{"article", "summary"}` records from `ingest_path`.
    pub mode: CorpusMode,
    pub ingest_path: Option<String>,
    #[serde(flatten)]
    pub synthetic: SyntheticCorpusParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusMode {
    Synthetic,
    Ingest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplatesSection {
    /// Template corpus path; empty means the bundled corpus.
    pub path: Option<String>,
    pub split_seed: u64,
    pub holdout_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub policy: ModelDims,
    pub critic: ModelDims,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub seed: u64,
    pub n_per_type: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Work directory; the `LENCTL_WORKDIR` environment variable overrides.
    pub workdir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 17,
            corpus: CorpusSection {
                mode: CorpusMode::Synthetic,
                ingest_path: None,
                synthetic: SyntheticCorpusParams::default(),
            },
            templates: TemplatesSection {
                path: None,
                split_seed: 17,
                holdout_fraction: 0.3,
            },
            model: ModelSection {
                policy: ModelDims {
                    n_layers: 2,
                    n_heads: 4,
                    d_model: 64,
                    max_context: 384,
                },
                critic: ModelDims {
                    n_layers: 2,
                    n_heads: 4,
                    d_model: 64,
                    max_context: 256,
                },
                init_seed: 7,
            },
            spe: ExtractorConfig::default(),
            sft: SftConfig::default(),
            ppo: PpoConfig::default(),
            inference: InferenceConfig::default(),
            eval: EvalSection {
                seed: 1234,
                n_per_type: 50,
            },
            paths: PathsSection {
                workdir: "lenctl-work".to_string(),
            },
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .io_context(format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.synthetic.validate()?;
        self.model.policy.validate()?;
        self.model.critic.validate()?;
        if self.corpus.mode == CorpusMode::Ingest && self.corpus.ingest_path.is_none() {
            return Err(Error::Config(
                "corpus.mode = \"ingest\" requires corpus.ingest_path".into(),
            ));
        }
        if self.inference.n_candidates == 0 {
            return Err(Error::Config("inference.n_candidates must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_toml())
            .io_context(format!("writing config {}", path.as_ref().display()))?;
        Ok(())
    }

    /// Loads the corpus according to the configured mode.
    pub fn load_corpus(&self) -> Result<Vec<crate::templates::CorpusExample>> {
        match self.corpus.mode {
            CorpusMode::Synthetic => crate::templates::gen_synthetic_corpus(&self.corpus.synthetic),
            CorpusMode::Ingest => {
                let path = self.corpus.ingest_path.as_ref().ok_or_else(|| {
                    Error::Config("corpus.mode = \"ingest\" requires corpus.ingest_path".into())
                })?;
                crate::data::read_jsonl(path)
            }
        }
    }

    /// Loads the template corpus (bundled unless a path is configured).
    pub fn load_templates(&self) -> Result<Vec<crate::templates::PromptTemplate>> {
        match &self.templates.path {
            None => Ok(crate::templates::bundled_templates().to_vec()),
            Some(p) => {
                let templates: Vec<crate::templates::PromptTemplate> =
                    crate::data::read_jsonl(p)?;
                for t in &templates {
                    t.validate()?;
                }
                Ok(templates)
            }
        }
    }
}
