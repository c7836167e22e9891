//! Trainable discriminative extractor.
//!
//! Token embeddings (integer tokens additionally carry their value as a
//! scalar feature) feed a three-tap window encoder; two classification
//! heads predict the minimum and maximum target values over the classes
//! `{absent, 0, 1, ..., v_max}`. In cls-3 mode a third head predicts the
//! control type directly. Value-head logits are pointer-structured: each
//! position holding an integer contributes a learned score to that
//! integer's class, which makes number reading a localization problem
//! instead of a 200-way regression.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::adamw::{AdamConfig, AdamW};
use crate::nn::graph::{Graph, NodeId, Tensor};
use crate::nn::model::ParamSet;
use crate::scp::{ControlType, StandardControlPrompt};
use crate::templates::AugmentedExample;
use crate::tokenizer::{Tokenizer, UNK};

use super::{minmax_to_scp, scp_to_minmax_encoding, ParseResult, ParseSource};

/// Head layout: cls-2 predicts minimum and maximum values only; cls-3 also
/// predicts the control type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorMode {
    Cls2,
    Cls3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub mode: ExtractorMode,
    pub d_model: usize,
    /// Largest predictable target value; classes are `{absent, 0..=v_max}`.
    pub v_max: u32,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of word tokens replaced by `<unk>` during training; makes
    /// the heads lean on sentence structure, which is what transfers to
    /// unseen phrasings.
    pub word_dropout: f64,
    pub val_fraction: f64,
    pub validate_every: usize,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            mode: ExtractorMode::Cls2,
            d_model: 32,
            v_max: 200,
            epochs: 3,
            batch_size: 32,
            lr: 3e-3,
            weight_decay: 1e-7,
            word_dropout: 0.15,
            val_fraction: 0.05,
            validate_every: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Keys {
    emb: usize,
    val_vec: usize,
    w0: usize,
    w1: usize,
    w2: usize,
    b: usize,
    u_min: usize,
    c_min: usize,
    u_max: usize,
    c_max: usize,
    a_min: usize,
    d_min: usize,
    a_max: usize,
    d_max: usize,
    bias_min: usize,
    bias_max: usize,
    w_type: Option<usize>,
    b_type: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ExtractorModel {
    pub mode: ExtractorMode,
    pub d_model: usize,
    pub v_max: u32,
    pub tokenizer: Tokenizer,
    pub params: ParamSet,
    keys: Keys,
}

/// One point of the training curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeValPoint {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Case-by-case accuracy with a per-type breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalBreakdown {
    pub n: usize,
    pub accuracy: f64,
    pub per_type_accuracy: Vec<(ControlType, f64, usize)>,
}

impl ExtractorModel {
    pub fn new(config: &ExtractorConfig, tokenizer: Tokenizer, seed: u64) -> ExtractorModel {
        let d = config.d_model;
        let v = tokenizer.vocab_size();
        let c = (config.v_max + 2) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut randn = |params: &mut ParamSet, name: &str, r: usize, cc: usize, scale: f64| {
            let mut t = Tensor::from_vec(
                r,
                cc,
                (0..r * cc).map(|_| rng.random_range(-scale..scale)).collect(),
            );
            t.quantize_f32();
            params.push(name, t)
        };
        let zeros = |params: &mut ParamSet, name: &str, r: usize, cc: usize| {
            params.push(name, Tensor::zeros(r, cc))
        };
        let keys = Keys {
            emb: randn(&mut params, "emb", v, d, 0.1),
            val_vec: randn(&mut params, "val_vec", 1, d, 0.1),
            w0: randn(&mut params, "win.w0", d, d, 0.2),
            w1: randn(&mut params, "win.w1", d, d, 0.2),
            w2: randn(&mut params, "win.w2", d, d, 0.2),
            b: zeros(&mut params, "win.b", 1, d),
            u_min: randn(&mut params, "head_min.u", d, 1, 0.2),
            c_min: zeros(&mut params, "head_min.c", 1, 1),
            u_max: randn(&mut params, "head_max.u", d, 1, 0.2),
            c_max: zeros(&mut params, "head_max.c", 1, 1),
            a_min: randn(&mut params, "head_min.absent", d, 1, 0.2),
            d_min: zeros(&mut params, "head_min.absent_b", 1, 1),
            a_max: randn(&mut params, "head_max.absent", d, 1, 0.2),
            d_max: zeros(&mut params, "head_max.absent_b", 1, 1),
            bias_min: zeros(&mut params, "head_min.bias", 1, c),
            bias_max: zeros(&mut params, "head_max.bias", 1, c),
            w_type: match config.mode {
                ExtractorMode::Cls3 => Some(randn(&mut params, "head_type.w", d, 5, 0.2)),
                ExtractorMode::Cls2 => None,
            },
            b_type: match config.mode {
                ExtractorMode::Cls3 => Some(zeros(&mut params, "head_type.b", 1, 5)),
                ExtractorMode::Cls2 => None,
            },
        };
        ExtractorModel {
            mode: config.mode,
            d_model: d,
            v_max: config.v_max,
            tokenizer,
            params,
            keys,
        }
    }

    fn n_classes(&self) -> usize {
        (self.v_max + 2) as usize
    }

    fn leaves(&self, g: &mut Graph) -> Vec<NodeId> {
        (0..self.params.len())
            .map(|k| g.param(k, self.params.get(k).clone()))
            .collect()
    }

    /// Head logits for one utterance: `(min [1,C], max [1,C], type [1,5]?)`.
    fn forward_on(
        &self,
        g: &mut Graph,
        leaves: &[NodeId],
        ids: &[u32],
    ) -> (NodeId, NodeId, Option<NodeId>) {
        let k = &self.keys;
        let t = ids.len();
        let x = g.gather(leaves[k.emb], ids);
        // Scalar value feature injected along a learned direction.
        let vals: Vec<f64> = ids
            .iter()
            .map(|&id| match self.tokenizer.number_value(id) {
                Some(v) => v as f64 / self.v_max as f64,
                None => 0.0,
            })
            .collect();
        let vals = g.input(Tensor::from_vec(t, 1, vals));
        let vf = g.matmul(vals, leaves[k.val_vec]);
        let x = g.add(x, vf);

        // Three-tap causal window encoder.
        let h0 = g.matmul(x, leaves[k.w0]);
        let s1 = g.row_shift(x, 1);
        let h1 = g.matmul(s1, leaves[k.w1]);
        let s2 = g.row_shift(x, 2);
        let h2 = g.matmul(s2, leaves[k.w2]);
        let h = g.add(h0, h1);
        let h = g.add(h, h2);
        let h = g.add_row(h, leaves[k.b]);
        let h = g.relu(h);

        let pooled = g.mean_rows(h);

        // Class index of each position's integer token, if any.
        let classes: Vec<Option<u32>> = ids
            .iter()
            .map(|&id| {
                self.tokenizer
                    .number_value(id)
                    .filter(|&v| v <= self.v_max)
                    .map(|v| v + 1)
            })
            .collect();
        let one_hot_absent = {
            let mut v = vec![0.0; self.n_classes()];
            v[0] = 1.0;
            g.input(Tensor::row(v))
        };

        let head = |g: &mut Graph, u: usize, c: usize, a: usize, d: usize, bias: usize| {
            let s = g.matmul(h, leaves[u]);
            let s = g.add_row(s, leaves[c]);
            let scattered = g.scatter_class_add(s, &classes, self.n_classes());
            let absent = g.matmul(pooled, leaves[a]);
            let absent = g.add(absent, leaves[d]);
            let absent_term = g.matmul(absent, one_hot_absent);
            let logits = g.add(scattered, absent_term);
            g.add(logits, leaves[bias])
        };
        let min_logits = head(g, k.u_min, k.c_min, k.a_min, k.d_min, k.bias_min);
        let max_logits = head(g, k.u_max, k.c_max, k.a_max, k.d_max, k.bias_max);
        let type_logits = match (k.w_type, k.b_type) {
            (Some(w), Some(b)) => {
                let tl = g.matmul(pooled, leaves[w]);
                Some(g.add_row(tl, leaves[b]))
            }
            _ => None,
        };
        (min_logits, max_logits, type_logits)
    }

    /// Raw head predictions `(min, max, type, confidence)` for an utterance.
    pub fn predict_heads(
        &self,
        utterance: &str,
    ) -> (Option<u32>, Option<u32>, Option<ControlType>, f64) {
        let ids = self.encode(utterance);
        let mut g = Graph::new();
        let leaves = self.leaves(&mut g);
        let (min_l, max_l, type_l) = self.forward_on(&mut g, &leaves, &ids);
        let take = |g: &mut Graph, node: NodeId| -> (usize, f64) {
            let sm = g.softmax_rows(node);
            let row = g.value(sm).row_slice(0);
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            (best, row[best])
        };
        let (min_cls, p1) = take(&mut g, min_l);
        let (max_cls, p2) = take(&mut g, max_l);
        let decode = |cls: usize| -> Option<u32> {
            if cls == 0 {
                None
            } else {
                Some(cls as u32 - 1)
            }
        };
        let mut confidence = p1 * p2;
        let ty = type_l.map(|tl| {
            let (cls, p3) = take(&mut g, tl);
            confidence *= p3;
            ControlType::ALL[cls]
        });
        (decode(min_cls), decode(max_cls), ty, confidence)
    }

    fn encode(&self, utterance: &str) -> Vec<u32> {
        let ids = self.tokenizer.encode(utterance);
        if ids.is_empty() {
            vec![UNK]
        } else {
            ids
        }
    }

    pub fn config_json(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "extractor",
            "mode": self.mode,
            "d_model": self.d_model,
            "v_max": self.v_max,
            "vocab_words": self.tokenizer.words(),
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::nn::checkpoint::save_checkpoint(path, &self.config_json(), &self.params)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<ExtractorModel> {
        let (config, params) = crate::nn::checkpoint::load_checkpoint(path)?;
        if config["kind"] != "extractor" {
            return Err(Error::Checkpoint(format!(
                "checkpoint kind {} where extractor was expected",
                config["kind"]
            )));
        }
        let mode: ExtractorMode = serde_json::from_value(config["mode"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad mode: {e}")))?;
        let d_model = config["d_model"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing d_model".into()))? as usize;
        let v_max = config["v_max"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing v_max".into()))? as u32;
        let words: Vec<String> = serde_json::from_value(config["vocab_words"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad vocab: {e}")))?;
        let cfg = ExtractorConfig {
            mode,
            d_model,
            v_max,
            ..Default::default()
        };
        let mut model = ExtractorModel::new(&cfg, Tokenizer::from_words(words), 0);
        for key in 0..model.params.len() {
            let name = model.params.name(key).to_string();
            let from = params
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if params.get(from).shape() != model.params.get(key).shape() {
                return Err(Error::Checkpoint(format!("parameter {name} shape mismatch")));
            }
            *model.params.get_mut(key) = params.get(from).clone();
        }
        Ok(model)
    }
}

/// Deterministic argmax extraction. cls-2 decodes via the minimum/maximum
/// rules (an inverted pair is swapped first); cls-3 trusts the type head
/// and repairs inconsistent value heads.
pub fn extract(model: &ExtractorModel, utterance: &str) -> ParseResult {
    let (pmin, pmax, ptype, confidence) = model.predict_heads(utterance);
    let scp = match ptype {
        None => decode_cls2(pmin, pmax),
        Some(t) => decode_cls3(t, pmin, pmax, model.v_max),
    };
    ParseResult {
        scp,
        confidence,
        source: ParseSource::Learned,
    }
}

fn decode_cls2(pmin: Option<u32>, pmax: Option<u32>) -> StandardControlPrompt {
    match minmax_to_scp(pmin, pmax) {
        Ok(scp) => scp,
        // min > max is the only invalid combination; swap and retry.
        Err(_) => minmax_to_scp(pmax, pmin).expect("swapped pair decodes"),
    }
}

fn decode_cls3(
    t: ControlType,
    pmin: Option<u32>,
    pmax: Option<u32>,
    v_max: u32,
) -> StandardControlPrompt {
    match t {
        ControlType::None => StandardControlPrompt::none(),
        ControlType::Less => {
            let m = pmax.or(pmin.filter(|&v| v > 0)).unwrap_or(v_max);
            StandardControlPrompt::less_than(m)
        }
        ControlType::More => {
            let m = pmin.filter(|&v| v > 0).or(pmax).unwrap_or(1);
            StandardControlPrompt::more_than(m)
        }
        ControlType::Equal => {
            let v = pmin.filter(|&v| v > 0).or(pmax).unwrap_or(1).max(1);
            StandardControlPrompt::equal(v).expect("positive equal target")
        }
        ControlType::Between => {
            let (a, b) = match (pmin, pmax) {
                (Some(a), Some(b)) if a < b => (a, b),
                (Some(a), Some(b)) if a > b => (b, a),
                (Some(a), Some(_)) => (a, a + 1),
                (Some(a), None) => (a, v_max.max(a + 1)),
                (None, Some(b)) if b > 0 => (0, b),
                (None, Some(_)) => (0, 1),
                (None, None) => (0, v_max.max(1)),
            };
            StandardControlPrompt::between(a, b).expect("repaired bounds are ordered")
        }
    }
}

fn head_targets(scp: &StandardControlPrompt, v_max: u32) -> Result<(u32, u32, u32)> {
    let (min, max) = scp_to_minmax_encoding(scp);
    let to_class = |v: Option<u32>| -> Result<u32> {
        match v {
            None => Ok(0),
            Some(x) if x <= v_max => Ok(x + 1),
            Some(x) => Err(Error::Dataset(format!(
                "target value {x} exceeds extractor v_max {v_max}"
            ))),
        }
    };
    let type_idx = ControlType::ALL
        .iter()
        .position(|&t| t == scp.control_type())
        .unwrap() as u32;
    Ok((to_class(min)?, to_class(max)?, type_idx))
}

/// Case-by-case correctness of raw head predictions: None labels are always
/// correct; More matches the minimum only (with a min<max consistency
/// check); Less matches the maximum likewise; Equal and Between match both.
fn case_correct(label: &StandardControlPrompt, pmin: Option<u32>, pmax: Option<u32>) -> bool {
    let (lmin, lmax) = scp_to_minmax_encoding(label);
    match label.control_type() {
        ControlType::None => true,
        ControlType::More => {
            pmin == lmin
                && match (pmin, pmax) {
                    (_, None) => true,
                    (Some(a), Some(b)) => a < b,
                    (None, Some(_)) => false,
                }
        }
        ControlType::Less => {
            pmax == lmax
                && match (pmin, pmax) {
                    (None, _) => true,
                    (Some(a), Some(b)) => a < b,
                    (Some(_), None) => false,
                }
        }
        ControlType::Equal | ControlType::Between => pmin == lmin && pmax == lmax,
    }
}

/// Trains the extractor; returns the model and its validation curve.
pub fn train_extractor(
    dataset: &[AugmentedExample],
    config: &ExtractorConfig,
    tokenizer: &Tokenizer,
) -> Result<(ExtractorModel, Vec<SpeValPoint>)> {
    if dataset.is_empty() {
        return Err(Error::Dataset("extractor dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ExtractorModel::new(config, tokenizer.clone(), config.seed);
    let mut opt = AdamW::new(
        AdamConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..Default::default()
        },
        &model.params,
    );

    // Held-out slice for the training curve.
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    shuffle(&mut order, &mut rng);
    let n_val = ((dataset.len() as f64 * config.val_fraction) as usize).max(1);
    let n_val = n_val.min(dataset.len() - 1).max(1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    if train_idx.is_empty() {
        train_idx = val_idx.clone();
    }

    let mut curve = Vec::new();
    let mut step = 0usize;
    for _epoch in 0..config.epochs {
        shuffle(&mut train_idx, &mut rng);
        for chunk in train_idx.chunks(config.batch_size) {
            let mut g = Graph::new();
            let leaves = model.leaves(&mut g);
            let mut total: Option<NodeId> = None;
            for &i in chunk {
                let ex = &dataset[i];
                let mut ids = model.encode(&ex.utterance);
                if config.word_dropout > 0.0 {
                    for id in ids.iter_mut() {
                        if model.tokenizer.number_value(*id).is_none()
                            && !model.tokenizer.is_special(*id)
                            && rng.random_range(0.0..1.0) < config.word_dropout
                        {
                            *id = UNK;
                        }
                    }
                }
                let (min_l, max_l, type_l) = model.forward_on(&mut g, &leaves, &ids);
                let (tmin, tmax, ttype) = head_targets(&ex.scp_label, model.v_max)?;
                let mut ce = cross_entropy(&mut g, min_l, tmin);
                let ce2 = cross_entropy(&mut g, max_l, tmax);
                ce = g.add(ce, ce2);
                if let Some(tl) = type_l {
                    let ce3 = cross_entropy(&mut g, tl, ttype);
                    ce = g.add(ce, ce3);
                }
                total = Some(match total {
                    Some(acc) => g.add(acc, ce),
                    None => ce,
                });
            }
            let total = total.expect("non-empty chunk");
            let loss = g.scale(total, 1.0 / chunk.len() as f64);
            let grads = g.backward(loss, model.params.len())?;
            opt.step(&mut model.params, &grads)?;
            step += 1;

            if step % config.validate_every == 0 {
                let (val_loss, val_acc) = validate(&model, dataset, &val_idx)?;
                curve.push(SpeValPoint {
                    step,
                    loss: val_loss,
                    accuracy: val_acc,
                });
            }
        }
    }
    let (val_loss, val_acc) = validate(&model, dataset, &val_idx)?;
    curve.push(SpeValPoint {
        step,
        loss: val_loss,
        accuracy: val_acc,
    });
    Ok((model, curve))
}

fn cross_entropy(g: &mut Graph, logits: NodeId, target: u32) -> NodeId {
    let ls = g.log_softmax_rows(logits);
    let picked = g.select(ls, &[(0, target)]);
    g.scale(picked, -1.0)
}

fn validate(
    model: &ExtractorModel,
    dataset: &[AugmentedExample],
    idx: &[usize],
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for &i in idx {
        let ex = &dataset[i];
        let ids = model.encode(&ex.utterance);
        let mut g = Graph::new();
        let leaves = model.leaves(&mut g);
        let (min_l, max_l, type_l) = model.forward_on(&mut g, &leaves, &ids);
        let (tmin, tmax, ttype) = head_targets(&ex.scp_label, model.v_max)?;
        let mut ce = cross_entropy(&mut g, min_l, tmin);
        let ce2 = cross_entropy(&mut g, max_l, tmax);
        ce = g.add(ce, ce2);
        if let Some(tl) = type_l {
            let ce3 = cross_entropy(&mut g, tl, ttype);
            ce = g.add(ce, ce3);
        }
        loss_sum += g.scalar_value(ce);
        let (pmin, pmax, _, _) = model.predict_heads(&ex.utterance);
        if case_correct(&ex.scp_label, pmin, pmax) {
            correct += 1;
        }
    }
    Ok((
        loss_sum / idx.len().max(1) as f64,
        correct as f64 / idx.len().max(1) as f64,
    ))
}

/// Case-by-case accuracy of a trained extractor over a labeled dataset.
pub fn eval_extractor(model: &ExtractorModel, dataset: &[AugmentedExample]) -> EvalBreakdown {
    let mut per_type: Vec<(ControlType, usize, usize)> = ControlType::ALL
        .iter()
        .map(|&t| (t, 0usize, 0usize))
        .collect();
    for ex in dataset {
        let (pmin, pmax, _, _) = model.predict_heads(&ex.utterance);
        let ok = case_correct(&ex.scp_label, pmin, pmax);
        let slot = per_type
            .iter_mut()
            .find(|(t, _, _)| *t == ex.scp_label.control_type())
            .unwrap();
        slot.2 += 1;
        if ok {
            slot.1 += 1;
        }
    }
    let n: usize = per_type.iter().map(|(_, _, c)| c).sum();
    let correct: usize = per_type.iter().map(|(_, c, _)| c).sum();
    EvalBreakdown {
        n,
        accuracy: correct as f64 / n.max(1) as f64,
        per_type_accuracy: per_type
            .into_iter()
            .filter(|(_, _, c)| *c > 0)
            .map(|(t, c, total)| (t, c as f64 / total as f64, total))
            .collect(),
    }
}

pub(crate) fn shuffle<T>(xs: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..xs.len()).rev() {
        let j = rng.random_range(0..=i);
        xs.swap(i, j);
    }
}
