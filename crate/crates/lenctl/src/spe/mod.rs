//! Standard prompt extractor (SPE): free-form utterance -> SCP.
//!
//! Two backends share the [`ParseResult`] contract: a deterministic
//! rule-based grammar over the template phrasings ([`rules`]) and a small
//! trainable extractor with classification heads over the minimum/maximum
//! target values ([`extractor`]). The two-value encoding fully determines
//! the control type (minimum 0 with a maximum present means "less than").

pub mod extractor;
pub mod rules;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scp::{ControlType, StandardControlPrompt};

pub use extractor::{
    eval_extractor, extract, train_extractor, EvalBreakdown, ExtractorConfig, ExtractorMode,
    ExtractorModel, SpeValPoint,
};
pub use rules::parse_rule_based;

/// Where a parse came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseSource {
    RuleBased,
    Learned,
}

/// A parsed control instruction with its provenance.
///
/// Rule-based results always carry confidence 1.0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParseResult {
    pub scp: StandardControlPrompt,
    pub confidence: f64,
    pub source: ParseSource,
}

impl ParseResult {
    pub fn rule_based(scp: StandardControlPrompt) -> ParseResult {
        ParseResult {
            scp,
            confidence: 1.0,
            source: ParseSource::RuleBased,
        }
    }
}

/// Encodes an SCP as `(min_class, max_class)` over `Option<u32>` values,
/// `None` meaning "absent". Less is canonically `(Some(0), Some(max))`.
pub fn scp_to_minmax_encoding(scp: &StandardControlPrompt) -> (Option<u32>, Option<u32>) {
    match scp.control_type() {
        ControlType::None => (None, None),
        ControlType::Less => (Some(0), scp.max_tokens()),
        ControlType::More => (scp.min_tokens(), None),
        ControlType::Equal | ControlType::Between => (scp.min_tokens(), scp.max_tokens()),
    }
}

/// Decodes a `(min, max)` pair back into an SCP.
///
/// Decoding rules, in order: both absent -> None; minimum absent or zero
/// with a maximum present -> Less; maximum absent -> More; equal values ->
/// Equal; `a < b` -> Between. `a > b` (both present) is rejected.
pub fn minmax_to_scp(min: Option<u32>, max: Option<u32>) -> Result<StandardControlPrompt> {
    match (min, max) {
        (None, None) => Ok(StandardControlPrompt::none()),
        (None, Some(b)) | (Some(0), Some(b)) => Ok(StandardControlPrompt::less_than(b)),
        (Some(a), None) => Ok(StandardControlPrompt::more_than(a)),
        (Some(a), Some(b)) if a == b => StandardControlPrompt::equal(a),
        (Some(a), Some(b)) if a < b => StandardControlPrompt::between(a, b),
        (Some(a), Some(b)) => Err(Error::InvalidScp(format!(
            "minimum {a} exceeds maximum {b}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scp::StandardControlPrompt as Scp;

    #[test]
    fn minmax_encoding_examples() {
        let eq = Scp::equal(87).unwrap();
        assert_eq!(scp_to_minmax_encoding(&eq), (Some(87), Some(87)));
        assert_eq!(minmax_to_scp(Some(87), Some(87)).unwrap(), eq);

        let le = Scp::less_than(80);
        assert_eq!(scp_to_minmax_encoding(&le), (Some(0), Some(80)));
        assert_eq!(minmax_to_scp(Some(0), Some(80)).unwrap(), le);
        assert_eq!(minmax_to_scp(None, Some(80)).unwrap(), le);

        assert_eq!(
            minmax_to_scp(Some(60), Some(90)).unwrap(),
            Scp::between(60, 90).unwrap()
        );
        assert_eq!(minmax_to_scp(None, None).unwrap(), Scp::none());
        assert!(minmax_to_scp(Some(90), Some(60)).is_err());
    }

    #[test]
    fn minmax_roundtrip_all_types() {
        let cases = [
            Scp::none(),
            Scp::equal(100).unwrap(),
            Scp::less_than(80),
            Scp::more_than(120),
            Scp::between(50, 150).unwrap(),
        ];
        for scp in cases {
            let (min, max) = scp_to_minmax_encoding(&scp);
            assert_eq!(minmax_to_scp(min, max).unwrap(), scp, "{scp}");
        }
    }
}
