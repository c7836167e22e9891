//! Prompt templates, target-length sampling, synthetic corpora and the
//! SPE dataset builder.
//!
//! A template is a natural-language phrasing with three placeholders: `*`
//! for the article, `!` for the minimum target length and `?` for the
//! maximum. The bundled corpus carries 18 phrasings per constrained control
//! type. Target lengths are sampled uniformly from [50, 150].

use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scp::{ControlType, StandardControlPrompt};

/// Inclusive target-length sampling range.
pub const TARGET_MIN: u32 = 50;
pub const TARGET_MAX: u32 = 150;

/// Bounds for synthetic summary lengths.
pub const SUMMARY_LEN_MIN: u32 = 10;
pub const SUMMARY_LEN_MAX: u32 = 200;

/// A user-utterance phrasing with placeholders.
///
/// `*` appears exactly once. `!`/`?` arity depends on the type: Equal and
/// Less carry one `?`, More carries one `!`, Between carries `!` then `?`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub id: String,
    #[serde(rename = "type")]
    pub control_type: ControlType,
    pub pattern: String,
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, control_type: ControlType, pattern: impl Into<String>) -> Result<Self> {
        let t = PromptTemplate {
            id: id.into(),
            control_type,
            pattern: pattern.into(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let stars = self.pattern.matches('*').count();
        let bangs = self.pattern.matches('!').count();
        let quests = self.pattern.matches('?').count();
        let expected = match self.control_type {
            ControlType::Equal | ControlType::Less => (0, 1),
            ControlType::More => (1, 0),
            ControlType::Between => (1, 1),
            ControlType::None => (0, 0),
        };
        if stars != 1 {
            return Err(Error::Template(format!(
                "template {}: expected exactly one '*', found {stars}",
                self.id
            )));
        }
        if (bangs, quests) != expected {
            return Err(Error::Template(format!(
                "template {}: placeholder arity ({bangs} '!', {quests} '?') does not match type {}",
                self.id, self.control_type
            )));
        }
        if self.control_type == ControlType::Between
            && self.pattern.find('!').unwrap() > self.pattern.find('?').unwrap()
        {
            return Err(Error::Template(format!(
                "template {}: '!' must precede '?'",
                self.id
            )));
        }
        Ok(())
    }
}

/// The bundled template corpus: 18 phrasings per constrained type.
pub fn bundled_templates() -> &'static [PromptTemplate] {
    static CORPUS: Lazy<Vec<PromptTemplate>> = Lazy::new(|| {
        let raw = include_str!("../assets/templates.jsonl");
        raw.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let t: PromptTemplate =
                    serde_json::from_str(l).expect("bundled template corpus is valid JSONL");
                t.validate().expect("bundled template is well-formed");
                t
            })
            .collect()
    });
    &CORPUS
}

/// An instantiated utterance with its ground-truth SCP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedExample {
    pub utterance: String,
    pub scp_label: StandardControlPrompt,
    pub article: String,
    pub reference_summary: Option<String>,
    pub template_id: String,
}

/// One article/summary pair; also the ingestion format for real corpora.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusExample {
    pub article: String,
    pub summary: String,
}

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpusParams {
    pub n_examples: usize,
    /// Mean summary length in tokens (71 is CNNDM-like, 104 NYT-like).
    pub summary_len_mean: f64,
    pub summary_len_sd: f64,
    pub article_len_mean: f64,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusParams {
    fn default() -> Self {
        SyntheticCorpusParams {
            n_examples: 10_000,
            summary_len_mean: 71.0,
            summary_len_sd: 28.0,
            article_len_mean: 64.0,
            vocab_size: 100,
            seed: 0,
        }
    }
}

impl SyntheticCorpusParams {
    pub fn validate(&self) -> Result<()> {
        if self.summary_len_mean <= 0.0 || self.article_len_mean <= 0.0 {
            return Err(Error::InvalidArgument(
                "length means must be positive".into(),
            ));
        }
        if self.summary_len_sd < 0.0 {
            return Err(Error::InvalidArgument(
                "summary_len_sd must be nonnegative".into(),
            ));
        }
        if self.vocab_size < 50 {
            return Err(Error::InvalidArgument(format!(
                "vocab_size {} below minimum 50",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Samples target lengths for a control type, uniform on [50, 150].
///
/// Between draws two distinct values and sorts them; Equal uses one draw for
/// both bounds; None yields nothing.
pub fn sample_target_lengths(
    rng: &mut ChaCha8Rng,
    control_type: ControlType,
) -> (Option<u32>, Option<u32>) {
    let draw = |rng: &mut ChaCha8Rng| rng.random_range(TARGET_MIN..=TARGET_MAX);
    match control_type {
        ControlType::Equal => {
            let v = draw(rng);
            (Some(v), Some(v))
        }
        ControlType::Less => (None, Some(draw(rng))),
        ControlType::More => (Some(draw(rng)), None),
        ControlType::Between => {
            let a = draw(rng);
            let mut b = draw(rng);
            while b == a {
                b = draw(rng);
            }
            (Some(a.min(b)), Some(a.max(b)))
        }
        ControlType::None => (None, None),
    }
}

/// Builds the SCP for target sampling as in [`sample_target_lengths`].
pub fn sample_scp(rng: &mut ChaCha8Rng, control_type: ControlType) -> StandardControlPrompt {
    let (min, max) = sample_target_lengths(rng, control_type);
    StandardControlPrompt::new(control_type, min, max)
        .expect("sampled targets satisfy the type invariant")
}

/// Samples an SCP whose constraint is satisfied by a reference of `ref_len`
/// tokens. Equal pins the target to `ref_len` exactly; the other types draw
/// from [50, 150] restricted to the satisfying side, clamping to `ref_len`
/// when the restriction empties the range.
pub fn sample_scp_for_reference(
    rng: &mut ChaCha8Rng,
    control_type: ControlType,
    ref_len: u32,
) -> Result<StandardControlPrompt> {
    if ref_len == 0 {
        return Err(Error::InvalidArgument(
            "reference length must be at least 1".into(),
        ));
    }
    let lower_bound = |rng: &mut ChaCha8Rng| {
        // min <= ref_len with min in [50, 150]
        if ref_len >= TARGET_MIN {
            rng.random_range(TARGET_MIN..=ref_len.min(TARGET_MAX))
        } else {
            ref_len
        }
    };
    let upper_bound = |rng: &mut ChaCha8Rng| {
        // max >= ref_len with max in [50, 150]
        if ref_len <= TARGET_MAX {
            rng.random_range(ref_len.max(TARGET_MIN)..=TARGET_MAX)
        } else {
            ref_len
        }
    };
    let scp = match control_type {
        ControlType::Equal => StandardControlPrompt::equal(ref_len)?,
        ControlType::Less => StandardControlPrompt::less_than(upper_bound(rng)),
        ControlType::More => StandardControlPrompt::more_than(lower_bound(rng)),
        ControlType::Between => {
            let mut lo = lower_bound(rng);
            let mut hi = upper_bound(rng);
            let mut tries = 0;
            while lo >= hi {
                lo = lower_bound(rng);
                hi = upper_bound(rng);
                tries += 1;
                if tries > 1000 {
                    // Degenerate ranges (e.g. ref_len at a boundary): widen.
                    lo = lo.min(ref_len).saturating_sub(1).max(1);
                    hi = hi.max(ref_len) + 1;
                    break;
                }
            }
            StandardControlPrompt::between(lo, hi)?
        }
        ControlType::None => StandardControlPrompt::none(),
    };
    Ok(scp)
}

/// Instantiates a template: numbers are substituted first, the article last,
/// so articles containing literal `!`/`?` are never corrupted.
pub fn fill_template(
    template: &PromptTemplate,
    scp: &StandardControlPrompt,
    article: &str,
) -> Result<AugmentedExample> {
    if template.control_type != scp.control_type() {
        return Err(Error::Template(format!(
            "template {} is for type {}, got SCP of type {}",
            template.id,
            template.control_type,
            scp.control_type()
        )));
    }
    template.validate()?;
    let mut text = template.pattern.clone();
    match scp.control_type() {
        ControlType::Equal | ControlType::Less => {
            text = text.replacen('?', &scp.max_tokens().unwrap().to_string(), 1);
        }
        ControlType::More => {
            text = text.replacen('!', &scp.min_tokens().unwrap().to_string(), 1);
        }
        ControlType::Between => {
            text = text.replacen('!', &scp.min_tokens().unwrap().to_string(), 1);
            text = text.replacen('?', &scp.max_tokens().unwrap().to_string(), 1);
        }
        ControlType::None => {}
    }
    let utterance = text.replacen('*', article, 1);
    Ok(AugmentedExample {
        utterance,
        scp_label: *scp,
        article: article.to_string(),
        reference_summary: None,
        template_id: template.id.clone(),
    })
}

/// Splits the template corpus into in-sample and out-sample sets, stratified
/// per control type. `holdout_fraction` of each type goes out-of-sample.
pub fn split_templates(
    templates: &[PromptTemplate],
    rng: &mut ChaCha8Rng,
    holdout_fraction: f64,
) -> Result<(Vec<PromptTemplate>, Vec<PromptTemplate>)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "holdout_fraction must lie strictly between 0 and 1, got {holdout_fraction}"
        )));
    }
    let mut in_sample = Vec::new();
    let mut out_sample = Vec::new();
    for t in ControlType::CONSTRAINED {
        let mut group: Vec<&PromptTemplate> = templates
            .iter()
            .filter(|tpl| tpl.control_type == t)
            .collect();
        if group.is_empty() {
            continue;
        }
        let n = group.len();
        let n_out = (n as f64 * holdout_fraction).round() as usize;
        if n_out == 0 || n_out == n {
            return Err(Error::InvalidArgument(format!(
                "holdout_fraction {holdout_fraction} leaves an empty split for type {t} ({n} templates)"
            )));
        }
        // Fisher-Yates over the group, then take the tail as holdout.
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            group.swap(i, j);
        }
        for (i, tpl) in group.into_iter().enumerate() {
            if i < n - n_out {
                in_sample.push(tpl.clone());
            } else {
                out_sample.push(tpl.clone());
            }
        }
    }
    Ok((in_sample, out_sample))
}

/// Generates a synthetic article/summary corpus.
///
/// Articles are uniform draws over a `w0..wN` vocabulary; each summary is an
/// extractive prefix of its article plus keyword tokens sampled from the
/// article, with length following a Gaussian clipped to [10, 200]. Summaries
/// being drawn from the article keeps ROUGE against the reference meaningful.
pub fn gen_synthetic_corpus(params: &SyntheticCorpusParams) -> Result<Vec<CorpusExample>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let summary_dist = Normal::new(params.summary_len_mean, params.summary_len_sd.max(1e-12))
        .map_err(|e| Error::InvalidArgument(format!("summary length distribution: {e}")))?;
    let article_sd = (params.article_len_mean / 8.0).max(1.0);
    let article_dist = Normal::new(params.article_len_mean, article_sd)
        .map_err(|e| Error::InvalidArgument(format!("article length distribution: {e}")))?;

    let mut corpus = Vec::with_capacity(params.n_examples);
    for _ in 0..params.n_examples {
        let summary_len = (summary_dist.sample(&mut rng).round() as i64)
            .clamp(SUMMARY_LEN_MIN as i64, SUMMARY_LEN_MAX as i64) as usize;
        let article_len = (article_dist.sample(&mut rng).round() as i64).max(10) as usize;

        let article_tokens: Vec<String> = (0..article_len)
            .map(|_| format!("w{}", rng.random_range(0..params.vocab_size)))
            .collect();

        // Extractive summary: 80% prefix, 20% keywords from anywhere in the
        // article (with replacement, so summaries may exceed the article).
        let prefix_len = ((summary_len as f64) * 0.8).round() as usize;
        let prefix_len = prefix_len.min(article_len).min(summary_len);
        let mut summary_tokens: Vec<String> = article_tokens[..prefix_len].to_vec();
        while summary_tokens.len() < summary_len {
            let pick = rng.random_range(0..article_len);
            summary_tokens.push(article_tokens[pick].clone());
        }

        corpus.push(CorpusExample {
            article: article_tokens.join(" "),
            summary: summary_tokens.join(" "),
        });
    }
    Ok(corpus)
}

/// Builds a labeled dataset for extractor training: with probability
/// `p_none` an unconstrained example (the bare article), otherwise a random
/// constrained type, random targets in [50, 150] and a random template of
/// the matching type.
pub fn build_spe_dataset(
    corpus: &[CorpusExample],
    templates: &[PromptTemplate],
    rng: &mut ChaCha8Rng,
    n: usize,
    p_none: f64,
) -> Result<Vec<AugmentedExample>> {
    if corpus.is_empty() {
        return Err(Error::Dataset("corpus is empty".into()));
    }
    if templates.is_empty() {
        return Err(Error::Dataset("template set is empty".into()));
    }
    let by_type: Vec<(ControlType, Vec<&PromptTemplate>)> = ControlType::CONSTRAINED
        .iter()
        .map(|&t| {
            (
                t,
                templates
                    .iter()
                    .filter(|tpl| tpl.control_type == t)
                    .collect::<Vec<_>>(),
            )
        })
        .filter(|(_, v)| !v.is_empty())
        .collect();
    if by_type.is_empty() {
        return Err(Error::Dataset(
            "template set contains no constrained type".into(),
        ));
    }

    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let row = &corpus[rng.random_range(0..corpus.len())];
        if rng.random_range(0.0..1.0) < p_none {
            out.push(AugmentedExample {
                utterance: row.article.clone(),
                scp_label: StandardControlPrompt::none(),
                article: row.article.clone(),
                reference_summary: Some(row.summary.clone()),
                template_id: "none".to_string(),
            });
            continue;
        }
        let (control_type, group) = &by_type[rng.random_range(0..by_type.len())];
        let scp = sample_scp(rng, *control_type);
        let template = group[rng.random_range(0..group.len())];
        let mut ex = fill_template(template, &scp, &row.article)?;
        ex.reference_summary = Some(row.summary.clone());
        out.push(ex);
    }
    Ok(out)
}

/// Draws one constrained RL example: random type, targets from [50, 150]
/// independent of the reference length.
pub fn sample_rl_example(
    corpus: &[CorpusExample],
    templates: &[PromptTemplate],
    rng: &mut ChaCha8Rng,
) -> Result<AugmentedExample> {
    if corpus.is_empty() {
        return Err(Error::Dataset("corpus is empty".into()));
    }
    let row = &corpus[rng.random_range(0..corpus.len())];
    let control_type = ControlType::CONSTRAINED[rng.random_range(0..4)];
    let group: Vec<&PromptTemplate> = templates
        .iter()
        .filter(|tpl| tpl.control_type == control_type)
        .collect();
    if group.is_empty() {
        return Err(Error::Dataset(format!(
            "no template of type {control_type} available"
        )));
    }
    let scp = sample_scp(rng, control_type);
    let template = group[rng.random_range(0..group.len())];
    let mut ex = fill_template(template, &scp, &row.article)?;
    ex.reference_summary = Some(row.summary.clone());
    Ok(ex)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn bundled_corpus_is_complete_and_valid() {
        let corpus = bundled_templates();
        assert_eq!(corpus.len(), 72);
        for t in ControlType::CONSTRAINED {
            assert_eq!(
                corpus.iter().filter(|tpl| tpl.control_type == t).count(),
                18,
                "type {t}"
            );
        }
        // validate() ran at load; ids are unique.
        let mut ids: Vec<_> = corpus.iter().map(|t| t.id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 72);
    }

    #[test]
    fn target_sampling_ranges() {
        let mut r = rng(1);
        for _ in 0..2000 {
            let (min, max) = sample_target_lengths(&mut r, ControlType::Less);
            assert!(min.is_none());
            let m = max.unwrap();
            assert!((TARGET_MIN..=TARGET_MAX).contains(&m));

            let (min, max) = sample_target_lengths(&mut r, ControlType::Between);
            let (a, b) = (min.unwrap(), max.unwrap());
            assert!(a < b && a >= TARGET_MIN && b <= TARGET_MAX);

            let (min, max) = sample_target_lengths(&mut r, ControlType::Equal);
            assert_eq!(min, max);

            assert_eq!(
                sample_target_lengths(&mut r, ControlType::None),
                (None, None)
            );
        }
    }

    #[test]
    fn reference_sampling_always_satisfied() {
        // Brute-force oracle: every draw must satisfy the constraint.
        let mut r = rng(2);
        for _ in 0..100_000 {
            let scp = sample_scp_for_reference(&mut r, ControlType::Less, 70).unwrap();
            assert!(scp.max_tokens().unwrap() >= 70);
        }
        for _ in 0..100_000 {
            let scp = sample_scp_for_reference(&mut r, ControlType::Between, 100).unwrap();
            assert!(scp.min_tokens().unwrap() <= 100 && scp.max_tokens().unwrap() >= 100);
        }
        // All types, varied reference lengths, including clamped regimes.
        for ref_len in [1u32, 20, 50, 51, 100, 149, 150, 151, 200, 300] {
            for t in ControlType::CONSTRAINED {
                for _ in 0..200 {
                    let scp = sample_scp_for_reference(&mut r, t, ref_len).unwrap();
                    assert!(
                        scp.satisfied_by(ref_len),
                        "type {t} ref {ref_len} gave {scp}"
                    );
                }
            }
        }
        assert_eq!(
            sample_scp_for_reference(&mut r, ControlType::Equal, 87)
                .unwrap()
                .min_tokens(),
            Some(87)
        );
        assert!(sample_scp_for_reference(&mut r, ControlType::Less, 0).is_err());
    }

    #[test]
    fn fill_template_substitution() {
        let tpl = PromptTemplate::new("t1", ControlType::Less, "Summarize with less than ? tokens: *")
            .unwrap();
        let scp = StandardControlPrompt::less_than(80);
        let ex = fill_template(&tpl, &scp, "A B C").unwrap();
        assert_eq!(ex.utterance, "Summarize with less than 80 tokens: A B C");

        let tpl = PromptTemplate::new("t2", ControlType::Between, "summarize \"*\" with ! to ? Tokens")
            .unwrap();
        let scp = StandardControlPrompt::between(60, 90).unwrap();
        let ex = fill_template(&tpl, &scp, "art").unwrap();
        assert_eq!(ex.utterance, "summarize \"art\" with 60 to 90 Tokens");

        // Articles containing placeholder characters pass through verbatim.
        let scp = StandardControlPrompt::less_than(70);
        let tpl = PromptTemplate::new("t3", ControlType::Less, "within ? tokens: *").unwrap();
        let ex = fill_template(&tpl, &scp, "does it work? yes! * fine").unwrap();
        assert_eq!(ex.utterance, "within 70 tokens: does it work? yes! * fine");

        // Type mismatch is rejected.
        let eq = StandardControlPrompt::equal(70).unwrap();
        assert!(fill_template(&tpl, &eq, "x").is_err());
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let corpus = bundled_templates();
        let (ins, outs) = split_templates(corpus, &mut rng(3), 0.3).unwrap();
        assert_eq!(ins.len() + outs.len(), 72);
        for t in ControlType::CONSTRAINED {
            let n_in = ins.iter().filter(|tpl| tpl.control_type == t).count();
            let n_out = outs.iter().filter(|tpl| tpl.control_type == t).count();
            assert_eq!(n_in + n_out, 18);
            assert!((5..=6).contains(&n_out), "type {t}: {n_out} held out");
        }
        // No overlap.
        for o in &outs {
            assert!(ins.iter().all(|i| i.id != o.id));
        }
        // Determinism.
        let (ins2, outs2) = split_templates(corpus, &mut rng(3), 0.3).unwrap();
        assert_eq!(ins, ins2);
        assert_eq!(outs, outs2);
        // Degenerate fractions are rejected.
        assert!(split_templates(corpus, &mut rng(3), 0.0).is_err());
        assert!(split_templates(corpus, &mut rng(3), 1.0).is_err());
        assert!(split_templates(corpus, &mut rng(3), 0.01).is_err());
    }

    #[test]
    fn synthetic_corpus_statistics() {
        // Sample-statistics oracle: empirical mean/sd near the configured ones.
        let params = SyntheticCorpusParams {
            n_examples: 10_000,
            ..Default::default()
        };
        let corpus = gen_synthetic_corpus(&params).unwrap();
        assert_eq!(corpus.len(), 10_000);
        let lens: Vec<f64> = corpus
            .iter()
            .map(|c| c.summary.split_whitespace().count() as f64)
            .collect();
        let mean = lens.iter().sum::<f64>() / lens.len() as f64;
        let var = lens.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / lens.len() as f64;
        let sd = var.sqrt();
        assert!((mean - 71.0).abs() < 2.0, "mean {mean}");
        assert!((sd - 28.0).abs() < 2.0, "sd {sd}");

        // Summary tokens come from the article (modulo multiplicity).
        for c in corpus.iter().take(200) {
            let article: std::collections::HashSet<&str> = c.article.split_whitespace().collect();
            for tok in c.summary.split_whitespace() {
                assert!(article.contains(tok));
            }
        }

        // Reproducibility and edge cases.
        let corpus2 = gen_synthetic_corpus(&params).unwrap();
        assert_eq!(corpus, corpus2);
        let empty = gen_synthetic_corpus(&SyntheticCorpusParams {
            n_examples: 0,
            ..Default::default()
        })
        .unwrap();
        assert!(empty.is_empty());
        assert!(gen_synthetic_corpus(&SyntheticCorpusParams {
            vocab_size: 30,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn nyt_like_lengths() {
        let params = SyntheticCorpusParams {
            n_examples: 10_000,
            summary_len_mean: 104.0,
            article_len_mean: 120.0,
            ..Default::default()
        };
        let corpus = gen_synthetic_corpus(&params).unwrap();
        let mean = corpus
            .iter()
            .map(|c| c.summary.split_whitespace().count() as f64)
            .sum::<f64>()
            / corpus.len() as f64;
        assert!((mean - 104.0).abs() < 2.0, "mean {mean}");
    }

    #[test]
    fn spe_dataset_none_fraction_and_split_respect() {
        let params = SyntheticCorpusParams {
            n_examples: 200,
            article_len_mean: 30.0,
            ..Default::default()
        };
        let corpus = gen_synthetic_corpus(&params).unwrap();
        let n = 1000;
        let ds = build_spe_dataset(corpus.as_slice(), bundled_templates(), &mut rng(5), n, 0.2)
            .unwrap();
        assert_eq!(ds.len(), n);
        let n_none = ds
            .iter()
            .filter(|e| e.scp_label.control_type() == ControlType::None)
            .count();
        // Binomial(1000, 0.2): mean 200, sd ~12.6; allow 3 sigma.
        assert!((162..=238).contains(&n_none), "none count {n_none}");

        // Restricting templates to a split keeps out-sample ids absent.
        let (ins, outs) = split_templates(bundled_templates(), &mut rng(6), 0.3).unwrap();
        let ds = build_spe_dataset(corpus.as_slice(), &ins, &mut rng(7), 500, 0.1).unwrap();
        for e in &ds {
            assert!(outs.iter().all(|o| o.id != e.template_id));
        }

        // Determinism: same seed, byte-identical serialization.
        let a = build_spe_dataset(corpus.as_slice(), &ins, &mut rng(8), 200, 0.2).unwrap();
        let b = build_spe_dataset(corpus.as_slice(), &ins, &mut rng(8), 200, 0.2).unwrap();
        let ja = a.iter().map(|e| serde_json::to_string(e).unwrap()).collect::<Vec<_>>();
        let jb = b.iter().map(|e| serde_json::to_string(e).unwrap()).collect::<Vec<_>>();
        assert_eq!(ja, jb);
    }

    #[test]
    fn substituted_numbers_are_plain_decimal() {
        let mut r = rng(9);
        for tpl in bundled_templates() {
            let scp = sample_scp(&mut r, tpl.control_type);
            let ex = fill_template(tpl, &scp, "w1 w2 w3").unwrap();
            if let Some(m) = ex.scp_label.min_tokens() {
                assert!(ex.utterance.contains(&m.to_string()));
            }
            if let Some(m) = ex.scp_label.max_tokens() {
                assert!(ex.utterance.contains(&m.to_string()));
            }
            assert!(!ex.utterance.contains(','));
        }
    }
}
