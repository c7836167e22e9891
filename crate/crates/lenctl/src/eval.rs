//! Metrics and experiment harness: ROUGE-1/2/L F1, per-type control-error
//! suites, reference-length baseline errors, and unseen-template
//! generalization.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{infer, InferenceConfig};
use crate::nn::model::PolicyModel;
use crate::scp::{compute_reward, ControlType};
use crate::spe::extractor::ExtractorModel;
use crate::templates::{fill_template, sample_scp, CorpusExample, PromptTemplate};
use crate::tokenizer::split_text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RougeVariant {
    R1,
    R2,
    RL,
}

/// F1 in [0, 100]. `empty_reference` flags the degenerate case where the
/// score is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RougeScore {
    pub score: f64,
    pub empty_reference: bool,
}

/// ROUGE F1 between a candidate and a reference: unigram/bigram overlap for
/// R1/R2, longest common subsequence for RL. No stemming or stopword
/// handling.
pub fn rouge_f1(candidate: &str, reference: &str, variant: RougeVariant) -> RougeScore {
    let cand = split_text(candidate);
    let refr = split_text(reference);
    if refr.is_empty() {
        return RougeScore {
            score: 0.0,
            empty_reference: true,
        };
    }
    if cand.is_empty() {
        return RougeScore {
            score: 0.0,
            empty_reference: false,
        };
    }
    let (overlap, n_cand, n_ref) = match variant {
        RougeVariant::R1 => (clipped_overlap(&cand, &refr, 1), cand.len(), refr.len()),
        RougeVariant::R2 => {
            if cand.len() < 2 || refr.len() < 2 {
                return RougeScore {
                    score: 0.0,
                    empty_reference: false,
                };
            }
            (
                clipped_overlap(&cand, &refr, 2),
                cand.len() - 1,
                refr.len() - 1,
            )
        }
        RougeVariant::RL => (lcs_len(&cand, &refr), cand.len(), refr.len()),
    };
    let p = overlap as f64 / n_cand as f64;
    let r = overlap as f64 / n_ref as f64;
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    RougeScore {
        score: 100.0 * f1,
        empty_reference: false,
    }
}

fn clipped_overlap(cand: &[String], refr: &[String], n: usize) -> usize {
    fn grams<'a>(xs: &'a [String], n: usize) -> HashMap<&'a [String], usize> {
        let mut m = HashMap::new();
        for w in xs.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
        m
    }
    let c = grams(cand, n);
    let r = grams(refr, n);
    c.into_iter()
        .map(|(g, cc)| cc.min(r.get(&g).copied().unwrap_or(0)))
        .sum()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let n = b.len();
    let mut prev = vec![0usize; n + 1];
    let mut cur = vec![0usize; n + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// The four evaluation settings compared in the multi-type experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalSetting {
    Prompt,
    PromptRl,
    PromptFilter,
    PromptRlFilter,
}

impl std::fmt::Display for EvalSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EvalSetting::Prompt => "Prompt",
            EvalSetting::PromptRl => "Prompt+RL",
            EvalSetting::PromptFilter => "Prompt+filter",
            EvalSetting::PromptRlFilter => "Prompt+RL+filter",
        };
        f.write_str(s)
    }
}

/// Aggregates for one control type (ROUGE values in percent, error in
/// tokens).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct TypeRow {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rougel: f64,
    pub control_error: f64,
    pub n: usize,
}

/// Per-type rows plus the mixed-type (MU) aggregate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: EvalSetting,
    pub quality_metric: String,
    pub per_type: Vec<(ControlType, TypeRow)>,
    pub mu: TypeRow,
}

impl EvalReport {
    fn from_rows(setting: EvalSetting, per_type: Vec<(ControlType, TypeRow)>) -> EvalReport {
        let mu = aggregate(&per_type);
        EvalReport {
            setting,
            quality_metric: "rougeL".to_string(),
            per_type,
            mu,
        }
    }

    pub fn row(&self, t: ControlType) -> Option<&TypeRow> {
        self.per_type.iter().find(|(tt, _)| *tt == t).map(|(_, r)| r)
    }

    /// One CSV row per type plus the MU row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("setting,type,rouge1,rouge2,rougeL,control_error,n\n");
        let mut push = |label: &str, r: &TypeRow| {
            s.push_str(&format!(
                "{},{},{:.2},{:.2},{:.2},{:.3},{}\n",
                self.setting, label, r.rouge1, r.rouge2, r.rougel, r.control_error, r.n
            ));
        };
        push("MU", &self.mu);
        for (t, r) in &self.per_type {
            push(t.abbrev(), r);
        }
        s
    }
}

/// Sample-weighted mean of per-type rows.
pub fn aggregate(rows: &[(ControlType, TypeRow)]) -> TypeRow {
    let n: usize = rows.iter().map(|(_, r)| r.n).sum();
    if n == 0 {
        return TypeRow::default();
    }
    let mut mu = TypeRow {
        n,
        ..Default::default()
    };
    for (_, r) in rows {
        let w = r.n as f64;
        mu.rouge1 += w * r.rouge1;
        mu.rouge2 += w * r.rouge2;
        mu.rougel += w * r.rougel;
        mu.control_error += w * r.control_error;
    }
    mu.rouge1 /= n as f64;
    mu.rouge2 /= n as f64;
    mu.rougel /= n as f64;
    mu.control_error /= n as f64;
    mu
}

/// Test material: articles with reference summaries plus the template pool
/// used to phrase instructions.
pub struct TestSet<'a> {
    pub corpus: &'a [CorpusExample],
    pub templates: &'a [PromptTemplate],
}

#[derive(Debug, Clone)]
pub struct EvalSuiteConfig {
    pub setting: EvalSetting,
    pub types: Vec<ControlType>,
    pub n_per_type: usize,
    pub seed: u64,
    pub inference: InferenceConfig,
}

/// Samples instructions per control type (targets uniform on [50, 150]),
/// runs end-to-end inference and aggregates ROUGE and control error.
/// Deterministic given the seed.
pub fn control_error_suite(
    policy: &PolicyModel,
    extractor: Option<&ExtractorModel>,
    test: &TestSet<'_>,
    cfg: &EvalSuiteConfig,
) -> Result<EvalReport> {
    if test.corpus.is_empty() {
        return Err(Error::Dataset("empty evaluation corpus".into()));
    }
    let mut per_type = Vec::new();
    for &t in &cfg.types {
        let group: Vec<&PromptTemplate> = test
            .templates
            .iter()
            .filter(|tpl| tpl.control_type == t)
            .collect();
        if group.is_empty() && t != ControlType::None {
            return Err(Error::Dataset(format!("no template of type {t}")));
        }
        let mut row = TypeRow::default();
        for i in 0..cfg.n_per_type {
            let mut rng = derive_rng(cfg.seed, (t as u64) << 32 | i as u64);
            let article_row = &test.corpus[rng.random_range(0..test.corpus.len())];
            let scp = sample_scp(&mut rng, t);
            let utterance = if t == ControlType::None {
                article_row.article.clone()
            } else {
                let tpl = group[rng.random_range(0..group.len())];
                fill_template(tpl, &scp, &article_row.article)?.utterance
            };
            let result = infer(policy, extractor, &utterance, &cfg.inference, &mut rng)?;
            let gen_len = policy
                .tokenizer
                .content_len(&policy.tokenizer.encode(&result.output));
            // Score against the sampled instruction (the ground truth), not
            // the extractor output.
            row.control_error += compute_reward(&scp, gen_len).control_error;
            row.rouge1 += rouge_f1(&result.output, &article_row.summary, RougeVariant::R1).score;
            row.rouge2 += rouge_f1(&result.output, &article_row.summary, RougeVariant::R2).score;
            row.rougel += rouge_f1(&result.output, &article_row.summary, RougeVariant::RL).score;
            row.n += 1;
        }
        if row.n > 0 {
            row.rouge1 /= row.n as f64;
            row.rouge2 /= row.n as f64;
            row.rougel /= row.n as f64;
            row.control_error /= row.n as f64;
        }
        per_type.push((t, row));
    }
    Ok(EvalReport::from_rows(cfg.setting, per_type))
}

/// Baseline control errors computed from reference lengths alone: for each
/// reference, sample an instruction per type and score the reference's own
/// length against it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineReport {
    pub per_type: Vec<(ControlType, f64)>,
    pub mu: f64,
}

pub fn baseline_reference_error(
    reference_lengths: &[u32],
    rng: &mut ChaCha8Rng,
    types: &[ControlType],
) -> BaselineReport {
    let mut per_type = Vec::new();
    let mut mu_sum = 0.0;
    let mut mu_n = 0usize;
    for &t in types {
        let mut sum = 0.0;
        for &len in reference_lengths {
            let scp = sample_scp(rng, t);
            sum += compute_reward(&scp, len).control_error;
        }
        let mean = sum / reference_lengths.len().max(1) as f64;
        per_type.push((t, mean));
        mu_sum += sum;
        mu_n += reference_lengths.len();
    }
    BaselineReport {
        per_type,
        mu: mu_sum / mu_n.max(1) as f64,
    }
}

/// In-sample vs out-sample template evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub in_sample: EvalReport,
    pub out_sample: EvalReport,
}

/// Evaluates a model trained on `training_manifest` template ids against
/// both template pools. Rejects when any manifest id appears in the
/// out-sample pool (leakage).
#[allow(clippy::too_many_arguments)]
pub fn generalization_eval(
    policy: &PolicyModel,
    extractor: Option<&ExtractorModel>,
    corpus: &[CorpusExample],
    in_templates: &[PromptTemplate],
    out_templates: &[PromptTemplate],
    training_manifest: &[String],
    cfg: &EvalSuiteConfig,
) -> Result<GeneralizationReport> {
    for id in training_manifest {
        if out_templates.iter().any(|t| &t.id == id) {
            return Err(Error::TemplateLeakage(format!(
                "template {id} was used in training but is in the out-sample pool"
            )));
        }
    }
    let in_report = control_error_suite(
        policy,
        extractor,
        &TestSet {
            corpus,
            templates: in_templates,
        },
        cfg,
    )?;
    let out_report = control_error_suite(
        policy,
        extractor,
        &TestSet {
            corpus,
            templates: out_templates,
        },
        cfg,
    )?;
    Ok(GeneralizationReport {
        in_sample: in_report,
        out_sample: out_report,
    })
}

/// Splitmix-style stream derivation for per-item rngs.
pub fn derive_rng(master: u64, stream: u64) -> ChaCha8Rng {
    let mut z = master ^ stream.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}
