//! Standard control prompts (SCPs) and the rule-based length reward.
//!
//! An SCP is the canonical statement of a length constraint: one of
//! `equal to` / `less than` / `more than` / `between` / `none`, with target
//! token counts. The reward is a piecewise-linear function of the generated
//! length that is zero exactly on the satisfying set and decreases one token
//! per token of violation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The five control types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlType {
    Equal,
    Less,
    More,
    Between,
    None,
}

impl ControlType {
    /// The four types that actually constrain the output length.
    pub const CONSTRAINED: [ControlType; 4] = [
        ControlType::Equal,
        ControlType::Less,
        ControlType::More,
        ControlType::Between,
    ];

    /// All five types.
    pub const ALL: [ControlType; 5] = [
        ControlType::Equal,
        ControlType::Less,
        ControlType::More,
        ControlType::Between,
        ControlType::None,
    ];

    /// Two-letter report abbreviation (EQ/LE/MO/BT/NO).
    pub fn abbrev(self) -> &'static str {
        match self {
            ControlType::Equal => "EQ",
            ControlType::Less => "LE",
            ControlType::More => "MO",
            ControlType::Between => "BT",
            ControlType::None => "NO",
        }
    }

    pub fn parse_abbrev(s: &str) -> Option<ControlType> {
        match s.to_ascii_uppercase().as_str() {
            "EQ" => Some(ControlType::Equal),
            "LE" => Some(ControlType::Less),
            "MO" => Some(ControlType::More),
            "BT" => Some(ControlType::Between),
            "NO" => Some(ControlType::None),
            _ => None,
        }
    }
}

impl fmt::Display for ControlType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ControlType::Equal => "equal",
            ControlType::Less => "less",
            ControlType::More => "more",
            ControlType::Between => "between",
            ControlType::None => "none",
        };
        f.write_str(s)
    }
}

/// A validated standard control prompt.
///
/// Field presence is tied to the control type:
///
/// | type    | min | max | extra            |
/// |---------|-----|-----|------------------|
/// | Equal   | yes | yes | min == max, >= 1 |
/// | Less    | no  | yes |                  |
/// | More    | yes | no  |                  |
/// | Between | yes | yes | min < max        |
/// | None    | no  | no  |                  |
///
/// Construct through [`StandardControlPrompt::new`] or the per-type helpers;
/// the invariant is checked once at the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "ScpRepr", into = "ScpRepr")]
pub struct StandardControlPrompt {
    control_type: ControlType,
    min_tokens: Option<u32>,
    max_tokens: Option<u32>,
}

/// Serde wire form: `{"type": "...", "min": ..., "max": ...}`.
#[derive(Serialize, Deserialize)]
struct ScpRepr {
    #[serde(rename = "type")]
    control_type: ControlType,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    min: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    max: Option<u32>,
}

impl TryFrom<ScpRepr> for StandardControlPrompt {
    type Error = Error;
    fn try_from(r: ScpRepr) -> Result<Self> {
        StandardControlPrompt::new(r.control_type, r.min, r.max)
    }
}

impl From<StandardControlPrompt> for ScpRepr {
    fn from(s: StandardControlPrompt) -> ScpRepr {
        ScpRepr {
            control_type: s.control_type,
            min: s.min_tokens,
            max: s.max_tokens,
        }
    }
}

impl StandardControlPrompt {
    /// Validates the type/field invariant and builds the prompt.
    pub fn new(
        control_type: ControlType,
        min_tokens: Option<u32>,
        max_tokens: Option<u32>,
    ) -> Result<Self> {
        let ok = match control_type {
            ControlType::Equal => match (min_tokens, max_tokens) {
                (Some(a), Some(b)) => a == b && a >= 1,
                _ => false,
            },
            ControlType::Less => min_tokens.is_none() && max_tokens.is_some(),
            ControlType::More => min_tokens.is_some() && max_tokens.is_none(),
            ControlType::Between => match (min_tokens, max_tokens) {
                (Some(a), Some(b)) => a < b,
                _ => false,
            },
            ControlType::None => min_tokens.is_none() && max_tokens.is_none(),
        };
        if ok {
            Ok(Self {
                control_type,
                min_tokens,
                max_tokens,
            })
        } else {
            Err(Error::InvalidScp(format!(
                "invalid field combination for type {control_type}: min={min_tokens:?} max={max_tokens:?}"
            )))
        }
    }

    pub fn equal(target: u32) -> Result<Self> {
        Self::new(ControlType::Equal, Some(target), Some(target))
    }

    pub fn less_than(max: u32) -> Self {
        Self {
            control_type: ControlType::Less,
            min_tokens: None,
            max_tokens: Some(max),
        }
    }

    pub fn more_than(min: u32) -> Self {
        Self {
            control_type: ControlType::More,
            min_tokens: Some(min),
            max_tokens: None,
        }
    }

    pub fn between(min: u32, max: u32) -> Result<Self> {
        Self::new(ControlType::Between, Some(min), Some(max))
    }

    pub fn none() -> Self {
        Self {
            control_type: ControlType::None,
            min_tokens: None,
            max_tokens: None,
        }
    }

    pub fn control_type(&self) -> ControlType {
        self.control_type
    }

    pub fn min_tokens(&self) -> Option<u32> {
        self.min_tokens
    }

    pub fn max_tokens(&self) -> Option<u32> {
        self.max_tokens
    }

    /// True when a generation of `len` tokens satisfies the constraint.
    pub fn satisfied_by(&self, len: u32) -> bool {
        compute_reward(self, len).control_error == 0.0
    }
}

impl fmt::Display for StandardControlPrompt {
    /// Displays as the canonical rendering.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_scp(self))
    }
}

/// Reward (non-positive) and control error (its negation), in token units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardValue {
    pub reward: f64,
    pub control_error: f64,
}

impl RewardValue {
    fn from_error(error: f64) -> Self {
        RewardValue {
            reward: -error,
            control_error: error,
        }
    }
}

/// Renders the canonical SCP string: lowercase, single spaces.
///
/// `equal to N tokens` / `less than N tokens` / `more than N tokens` /
/// `between A and B tokens` / `none`.
pub fn render_scp(scp: &StandardControlPrompt) -> String {
    match scp.control_type {
        ControlType::Equal => format!("equal to {} tokens", scp.min_tokens.unwrap()),
        ControlType::Less => format!("less than {} tokens", scp.max_tokens.unwrap()),
        ControlType::More => format!("more than {} tokens", scp.min_tokens.unwrap()),
        ControlType::Between => format!(
            "between {} and {} tokens",
            scp.min_tokens.unwrap(),
            scp.max_tokens.unwrap()
        ),
        ControlType::None => "none".to_string(),
    }
}

/// Exact inverse of [`render_scp`] on its image; anything else is a parse failure.
pub fn parse_canonical(text: &str) -> Result<StandardControlPrompt> {
    fn num(s: &str) -> Option<u32> {
        if !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) && (s == "0" || !s.starts_with('0'))
        {
            s.parse().ok()
        } else {
            None
        }
    }
    let fail = || Error::ScpParseFailure(text.to_string());

    if text == "none" {
        return Ok(StandardControlPrompt::none());
    }
    let words: Vec<&str> = text.split(' ').collect();
    let scp = match words.as_slice() {
        ["equal", "to", n, "tokens"] => {
            StandardControlPrompt::equal(num(n).ok_or_else(fail)?).map_err(|_| fail())?
        }
        ["less", "than", n, "tokens"] => {
            StandardControlPrompt::less_than(num(n).ok_or_else(fail)?)
        }
        ["more", "than", n, "tokens"] => {
            StandardControlPrompt::more_than(num(n).ok_or_else(fail)?)
        }
        ["between", a, "and", b, "tokens"] => {
            StandardControlPrompt::between(num(a).ok_or_else(fail)?, num(b).ok_or_else(fail)?)
                .map_err(|_| fail())?
        }
        _ => return Err(fail()),
    };
    // Reject non-canonical spellings that would not round-trip (e.g. "007").
    if render_scp(&scp) != text {
        return Err(fail());
    }
    Ok(scp)
}

/// The rule-based reward as a function of the generated length `L_g`:
///
/// * more than `L_t`:  `-max(0, L_t - L_g)`
/// * less than `L_t`:  `-max(0, -L_t + L_g)`
/// * equal to `L_t`:   `-|L_t - L_g|`
/// * between `L_L` and `L_U`: `-(max(0, L_L - L_g) + max(0, L_g - L_U))`
/// * none: `0`
pub fn compute_reward(scp: &StandardControlPrompt, generated_len: u32) -> RewardValue {
    let lg = generated_len as f64;
    let error = match scp.control_type {
        ControlType::Equal => {
            let lt = scp.min_tokens.unwrap() as f64;
            (lt - lg).abs()
        }
        ControlType::Less => {
            let lt = scp.max_tokens.unwrap() as f64;
            (lg - lt).max(0.0)
        }
        ControlType::More => {
            let lt = scp.min_tokens.unwrap() as f64;
            (lt - lg).max(0.0)
        }
        ControlType::Between => {
            let ll = scp.min_tokens.unwrap() as f64;
            let lu = scp.max_tokens.unwrap() as f64;
            (ll - lg).max(0.0) + (lg - lu).max(0.0)
        }
        ControlType::None => 0.0,
    };
    RewardValue::from_error(error)
}

/// One `(length, control_error)` point per length in `lens`.
pub fn error_curve(
    scp: &StandardControlPrompt,
    lens: impl IntoIterator<Item = u32>,
) -> Vec<(u32, f64)> {
    lens.into_iter()
        .map(|len| (len, compute_reward(scp, len).control_error))
        .collect()
}
