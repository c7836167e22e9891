//! lenctl: prompt-based length control for a small from-scratch language model.
//!
//! The toolkit covers the full loop:
//!
//! 1. **Instruction parsing** — free-form utterances ("Give me a summary with
//!    less than 80 tokens from ...") are mapped to a standard control prompt
//!    (SCP) by a rule-based parser or a small trained extractor ([`spe`]).
//! 2. **Rule-based reward** — piecewise-linear rewards over generated length
//!    per control type ([`scp`]).
//! 3. **Data** — an augmented-template corpus, synthetic article/summary
//!    corpora and dataset builders ([`templates`]).
//! 4. **Models** — a tape-based autodiff engine, a tiny decoder-only LM,
//!    AdamW, sampling and checkpoints ([`nn`]).
//! 5. **Training** — supervised fine-tuning on SCP-prefixed inputs ([`sft`])
//!    and a modified PPO with terminal rewards, a Q(scp, output) critic
//!    baseline, entropy/KL terms and a mixed SFT loss ([`ppo`]).
//! 6. **Inference** — best-of-N sample filtering by reward ([`infer`]) and
//!    evaluation harnesses: ROUGE, per-type control error suites, baselines
//!    and unseen-template generalization ([`eval`]).
//!
//! Runnable entry points live in `examples/`; the `lenctl` binary wraps the
//! same library calls as subcommands.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod infer;
pub mod nn;
pub mod ppo;
pub mod rundir;
pub mod scp;
pub mod sft;
pub mod spe;
pub mod templates;
pub mod tokenizer;

pub use error::{Error, Result};
pub use scp::{
    compute_reward, error_curve, parse_canonical, render_scp, ControlType, RewardValue,
    StandardControlPrompt,
};
