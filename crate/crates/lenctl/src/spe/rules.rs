//! Deterministic rule-based extractor.
//!
//! A small cue grammar over the phrase shapes of the template corpus:
//! integers adjacent to control phrases ("less than", "more than",
//! "exactly", "between ... and ...", "within", "no longer than", "over",
//! "N to M tokens", ...). Serves both as the labeling oracle for extractor
//! training and as the production fallback at inference.

use once_cell::sync::Lazy;
use regex::Regex;

use crate::error::{Error, Result};
use crate::scp::{ControlType, StandardControlPrompt};

use super::ParseResult;

struct Cue {
    regex: Regex,
    control_type: ControlType,
}

/// Cue tiers in priority order. A lower-tier match whose span intersects an
/// accepted higher-tier span is shadowed (e.g. the "90 tokens" inside
/// "between 60 and 90 tokens" never fires as an Equal cue).
static TIERS: Lazy<Vec<Vec<Cue>>> = Lazy::new(|| {
    let cue = |pat: &str, control_type| Cue {
        regex: Regex::new(pat).expect("static cue pattern compiles"),
        control_type,
    };
    vec![
        // Two-value range phrasings.
        vec![
            cue(r"between\s+(\d+)\s+and\s+(\d+)", ControlType::Between),
            cue(r"(?:with|of)\s+(\d+)\s+to\s+(\d+)\s+tokens?", ControlType::Between),
            cue(r"from\s+(\d+)\s+to\s+(\d+)\s+tokens?", ControlType::Between),
        ],
        // Upper-bound phrasings. "no longer than" must win over the
        // More-tier "longer than"; tier order plus span shadowing does it.
        vec![
            cue(
                r"(?:less\s+than|smaller\s+than|shorter\s+than|fewer\s+than|no\s+longer\s+than|no\s+more\s+than|at\s+most)\s+(\d+)",
                ControlType::Less,
            ),
            cue(r"within\s+(\d+)", ControlType::Less),
            cue(r"up\s+to\s+(\d+)", ControlType::Less),
        ],
        // Lower-bound phrasings.
        vec![
            cue(
                r"(?:more\s+than|larger\s+than|greater\s+than|longer\s+than|at\s+least|over)\s+(\d+)",
                ControlType::More,
            ),
        ],
        // Exact-value phrasings.
        vec![
            cue(
                r"(?:exactly|equal\s+to|about|around|approximately)\s+(\d+)",
                ControlType::Equal,
            ),
            cue(r"length\s+(\d+)", ControlType::Equal),
            cue(r"(?:with|of)\s+(\d+)\s+tokens?", ControlType::Equal),
        ],
    ]
});

fn parse_value(m: &str) -> Option<u32> {
    // Very long digit runs are article noise, not target lengths.
    if m.len() > 9 {
        return None;
    }
    m.parse().ok()
}

fn scp_from_match(control_type: ControlType, caps: &regex::Captures<'_>) -> Option<StandardControlPrompt> {
    match control_type {
        ControlType::Between => {
            let a = parse_value(caps.get(1)?.as_str())?;
            let b = parse_value(caps.get(2)?.as_str())?;
            StandardControlPrompt::between(a.min(b), a.max(b).max(a.min(b) + 1)).ok()
        }
        ControlType::Less => Some(StandardControlPrompt::less_than(parse_value(
            caps.get(1)?.as_str(),
        )?)),
        ControlType::More => Some(StandardControlPrompt::more_than(parse_value(
            caps.get(1)?.as_str(),
        )?)),
        ControlType::Equal => StandardControlPrompt::equal(parse_value(caps.get(1)?.as_str())?).ok(),
        ControlType::None => None,
    }
}

/// Parses an utterance with the cue grammar.
///
/// Returns a `None`-typed result when no control phrase matches. Two
/// surviving cues that disagree are reported as an ambiguity carrying both
/// candidate parses.
pub fn parse_rule_based(utterance: &str) -> Result<ParseResult> {
    let text = utterance.to_lowercase();
    let mut claimed: Vec<(usize, usize)> = Vec::new();
    let mut candidates: Vec<StandardControlPrompt> = Vec::new();

    for tier in TIERS.iter() {
        let mut tier_spans: Vec<(usize, usize)> = Vec::new();
        for cue in tier {
            for caps in cue.regex.captures_iter(&text) {
                let m = caps.get(0).unwrap();
                let span = (m.start(), m.end());
                if claimed
                    .iter()
                    .any(|&(s, e)| span.0 < e && s < span.1)
                {
                    continue;
                }
                if let Some(scp) = scp_from_match(cue.control_type, &caps) {
                    tier_spans.push(span);
                    if !candidates.contains(&scp) {
                        candidates.push(scp);
                    }
                }
            }
        }
        claimed.extend(tier_spans);
    }

    match candidates.len() {
        0 => Ok(ParseResult::rule_based(StandardControlPrompt::none())),
        1 => Ok(ParseResult::rule_based(candidates[0])),
        _ => Err(Error::AmbiguousInstruction { candidates }),
    }
}
