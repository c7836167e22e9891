//! Supervised training of the policy on SCP-prefixed inputs.
//!
//! Each example is `<scp> : <utterance>` -> reference summary, with the
//! loss masked to the summary tokens. The corpus is split into four
//! roughly equal parts, one per constrained control type, and targets are
//! sampled so the reference length satisfies the constraint (Equal pins the
//! target to the reference length exactly).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::rouge_f1;
use crate::nn::adamw::{AdamConfig, AdamW};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::model::{generate, PolicyModel, Sampling, TrunkLeaves};
use crate::scp::{compute_reward, parse_canonical, render_scp, ControlType};
use crate::spe::extractor::shuffle;
use crate::templates::{fill_template, sample_scp_for_reference, CorpusExample, PromptTemplate};
use crate::tokenizer::{Tokenizer, BOS, EOS, SEP};

/// One supervised example. The input starts with the canonical SCP string,
/// separated from the utterance by a single `:`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub input_text: String,
    pub target_text: String,
}

/// Tokenized example: full sequence ids and per-token loss flags (loss on
/// target tokens only).
#[derive(Debug, Clone)]
pub struct SftItem {
    pub ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

/// Tokenizes with right-truncation of the article; the SCP prefix and the
/// separator are never dropped.
pub fn tokenize_sft(
    tokenizer: &Tokenizer,
    example: &SftExample,
    max_context: usize,
) -> Result<SftItem> {
    let mut input = vec![BOS];
    input.extend(tokenizer.encode(&example.input_text));
    let mut target = tokenizer.encode(&example.target_text);
    target.push(EOS);

    // bos + input + sep + target must fit.
    let budget = max_context
        .checked_sub(target.len() + 1)
        .ok_or_else(|| Error::Dataset("target alone exceeds the context".into()))?;
    input.truncate(budget.max(8));
    input.push(SEP);

    let mut ids = input;
    let input_len = ids.len();
    ids.extend(&target);
    if ids.len() > max_context {
        ids.truncate(max_context);
    }
    let mask: Vec<bool> = (0..ids.len()).map(|i| i >= input_len).collect();
    Ok(SftItem {
        ids,
        loss_mask: mask,
    })
}

/// Builds the model input text for generation: `<scp> : <utterance>`.
pub fn prompt_text(scp: &crate::scp::StandardControlPrompt, utterance: &str) -> String {
    format!("{} : {}", render_scp(scp), utterance)
}

/// Tokenizes a prompt for generation, reserving room for `gen_budget` new
/// tokens. Returns `[bos] scp : utterance [sep]`.
pub fn prompt_ids(
    tokenizer: &Tokenizer,
    text: &str,
    max_context: usize,
    gen_budget: usize,
) -> Vec<u32> {
    let mut ids = vec![BOS];
    ids.extend(tokenizer.encode(text));
    let budget = max_context.saturating_sub(gen_budget + 1).max(8);
    ids.truncate(budget);
    ids.push(SEP);
    ids
}

/// Splits the corpus into four parts of approximately equal size, assigns
/// one constrained control type to each, samples a satisfying SCP per
/// reference, and renders the SCP-prefixed input.
pub fn build_sft_dataset(
    corpus: &[CorpusExample],
    templates: &[PromptTemplate],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SftExample>> {
    if corpus.is_empty() {
        return Err(Error::Dataset("corpus is empty".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    shuffle(&mut order, rng);
    let mut out = Vec::with_capacity(corpus.len());
    let quarter = corpus.len().div_ceil(4);
    for (slot, &i) in order.iter().enumerate() {
        let control_type = ControlType::CONSTRAINED[(slot / quarter).min(3)];
        let row = &corpus[i];
        let ref_len = row.summary.split_whitespace().count() as u32;
        let scp = sample_scp_for_reference(rng, control_type, ref_len)?;
        let group: Vec<&PromptTemplate> = templates
            .iter()
            .filter(|t| t.control_type == control_type)
            .collect();
        if group.is_empty() {
            return Err(Error::Dataset(format!(
                "no template of type {control_type}"
            )));
        }
        let template = group[rng.random_range(0..group.len())];
        let ex = fill_template(template, &scp, &row.article)?;
        out.push(SftExample {
            input_text: prompt_text(&scp, &ex.utterance),
            target_text: row.summary.clone(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub val_fraction: f64,
    pub validate_every: usize,
    /// Validation examples generated per validation step for the ROUGE and
    /// control-error columns of the training log.
    pub val_generations: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            steps: 1500,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-6,
            val_fraction: 0.02,
            validate_every: 150,
            val_generations: 24,
            seed: 0,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftValPoint {
    pub step: usize,
    pub loss: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rougel: f64,
    pub control_error: f64,
}

/// Masked cross-entropy of a batch, built on an existing graph. Returns the
/// summed-loss node and the number of target tokens it covers.
pub fn sft_loss_node(
    g: &mut Graph,
    model: &PolicyModel,
    leaves: &TrunkLeaves,
    items: &[&SftItem],
) -> Result<(NodeId, usize)> {
    let mut total: Option<NodeId> = None;
    let mut count = 0usize;
    for item in items {
        let t = item.ids.len();
        if t < 2 {
            continue;
        }
        let picks: Vec<(u32, u32)> = (0..t - 1)
            .filter(|&pos| item.loss_mask[pos + 1])
            .map(|pos| (pos as u32, item.ids[pos + 1]))
            .collect();
        if picks.is_empty() {
            continue;
        }
        count += picks.len();
        // Project only the rows that carry loss.
        let first = picks.iter().map(|&(r, _)| r).min().unwrap() as usize;
        let hidden = model.hidden_on(g, leaves, &item.ids[..t - 1]);
        let rows = g.row_range(hidden, first, t - 1);
        let logits = g.matmul_nt(rows, leaves.tok_emb);
        let ls = g.log_softmax_rows(logits);
        let shifted: Vec<(u32, u32)> = picks
            .iter()
            .map(|&(r, c)| (r - first as u32, c))
            .collect();
        let sel = g.select(ls, &shifted);
        let s = g.sum_all(sel);
        total = Some(match total {
            Some(acc) => g.add(acc, s),
            None => s,
        });
    }
    let total = total.ok_or_else(|| {
        Error::Dataset("batch has no unmasked target tokens (all-masked)".into())
    })?;
    let loss = g.scale(total, -1.0 / count as f64);
    Ok((loss, count))
}

/// Mean masked cross-entropy of a batch under the current parameters.
pub fn sft_loss(model: &PolicyModel, batch: &[SftItem]) -> Result<f64> {
    let refs: Vec<&SftItem> = batch.iter().collect();
    let mut g = Graph::new();
    let leaves = model.leaves(&mut g);
    let (loss, _) = sft_loss_node(&mut g, model, &leaves, &refs)?;
    Ok(g.scalar_value(loss))
}

/// Validation snapshot: loss plus generation quality on a few examples.
fn validation_point(
    model: &PolicyModel,
    val_items: &[SftItem],
    val_examples: &[SftExample],
    n_generate: usize,
    step: usize,
) -> Result<SftValPoint> {
    let loss = sft_loss(model, val_items)?;
    let mut r1 = 0.0;
    let mut r2 = 0.0;
    let mut rl = 0.0;
    let mut err = 0.0;
    let n = n_generate.min(val_examples.len());
    if n > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(step as u64);
        for ex in val_examples.iter().take(n) {
            let ids = prompt_ids(&model.tokenizer, &ex.input_text, model.dims.max_context, 200);
            let gen = generate(
                model,
                &ids,
                &Sampling {
                    temperature: 0.0,
                    top_k: None,
                    max_new_tokens: 200,
                },
                &mut rng,
            )?;
            let text = model.tokenizer.decode(&gen.ids);
            r1 += rouge_f1(&text, &ex.target_text, crate::eval::RougeVariant::R1).score;
            r2 += rouge_f1(&text, &ex.target_text, crate::eval::RougeVariant::R2).score;
            rl += rouge_f1(&text, &ex.target_text, crate::eval::RougeVariant::RL).score;
            if let Some(scp_text) = ex.input_text.split(" : ").next() {
                if let Ok(scp) = parse_canonical(scp_text) {
                    let len = model.tokenizer.content_len(&gen.ids);
                    err += compute_reward(&scp, len).control_error;
                }
            }
        }
        r1 /= n as f64;
        r2 /= n as f64;
        rl /= n as f64;
        err /= n as f64;
    }
    Ok(SftValPoint {
        step,
        loss,
        rouge1: r1,
        rouge2: r2,
        rougel: rl,
        control_error: err,
    })
}

/// Trains the policy; returns the checkpoint with the lowest validation
/// loss and the validation curve.
pub fn train_sft(
    mut model: PolicyModel,
    dataset: &[SftExample],
    config: &SftConfig,
) -> Result<(PolicyModel, Vec<SftValPoint>)> {
    if dataset.is_empty() {
        return Err(Error::Dataset("sft dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let items: Vec<SftItem> = dataset
        .iter()
        .map(|ex| tokenize_sft(&model.tokenizer, ex, model.dims.max_context))
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..items.len()).collect();
    shuffle(&mut order, &mut rng);
    let n_val = ((items.len() as f64 * config.val_fraction) as usize)
        .max(1)
        .min(items.len() / 2 + 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_items: Vec<SftItem> = val_idx.iter().map(|&i| items[i].clone()).collect();
    let val_examples: Vec<SftExample> = val_idx.iter().map(|&i| dataset[i].clone()).collect();
    if train_idx.is_empty() {
        return Err(Error::Dataset("dataset too small to split".into()));
    }

    let mut opt = AdamW::new(
        AdamConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..Default::default()
        },
        &model.params,
    );

    let mut curve = Vec::new();
    let mut best: Option<(f64, crate::nn::model::ParamSet)> = None;
    for step in 1..=config.steps {
        let batch: Vec<&SftItem> = (0..config.batch_size)
            .map(|_| &items[train_idx[rng.random_range(0..train_idx.len())]])
            .collect();
        let mut g = Graph::new();
        let leaves = model.leaves(&mut g);
        let (loss, _) = sft_loss_node(&mut g, &model, &leaves, &batch)?;
        let grads = g.backward(loss, model.params.len())?;
        opt.step(&mut model.params, &grads)?;

        if step % config.validate_every == 0 || step == config.steps {
            let point = validation_point(
                &model,
                &val_items,
                &val_examples,
                config.val_generations,
                step,
            )?;
            let is_better = best.as_ref().map(|(l, _)| point.loss < *l).unwrap_or(true);
            if is_better {
                best = Some((point.loss, model.params.clone()));
            }
            curve.push(point);
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, curve))
}
