//! Neural substrate: tape autodiff, a tiny decoder-only LM, a critic,
//! AdamW, sampling and binary checkpoints.

pub mod adamw;
pub mod checkpoint;
pub mod graph;
pub mod kernels;
pub mod model;

pub use adamw::{AdamConfig, AdamW};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use graph::{Graph, NodeId, Tensor};
pub use model::{generate, CriticModel, Generation, ModelDims, ParamSet, PolicyModel, Sampling};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{Tokenizer, BOS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// End-to-end gradient check on the full policy model: autograd vs
    /// central finite differences on randomly probed parameters of every
    /// layer type.
    #[test]
    fn policy_gradients_match_finite_differences() {
        let tok = Tokenizer::for_corpus_vocab(6);
        let model = PolicyModel::new(
            ModelDims {
                n_layers: 2,
                n_heads: 2,
                d_model: 12,
                max_context: 16,
            },
            tok,
            42,
        )
        .unwrap();
        let ids: Vec<u32> = vec![BOS, 9, 14, 30, 7, 22];
        let targets: Vec<u32> = vec![9, 14, 30, 7, 22, 2];

        let loss_value = |params: &ParamSet| -> f64 {
            let mut m = model.clone();
            m.params = params.clone();
            let mut g = Graph::new();
            let leaves = m.leaves(&mut g);
            let logits = m.forward_on(&mut g, &leaves, &ids);
            let ls = g.log_softmax_rows(logits);
            let picks: Vec<(u32, u32)> = targets
                .iter()
                .enumerate()
                .map(|(i, &t)| (i as u32, t))
                .collect();
            let sel = g.select(ls, &picks);
            let mean = g.mean_all(sel);
            let loss = g.scale(mean, -1.0);
            g.scalar_value(loss)
        };

        // Analytic gradients.
        let mut g = Graph::new();
        let leaves = model.leaves(&mut g);
        let logits = model.forward_on(&mut g, &leaves, &ids);
        let ls = g.log_softmax_rows(logits);
        let picks: Vec<(u32, u32)> = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| (i as u32, t))
            .collect();
        let sel = g.select(ls, &picks);
        let mean = g.mean_all(sel);
        let loss = g.scale(mean, -1.0);
        let grads = g.backward(loss, model.params.len()).unwrap();

        // Probe a few random elements of every parameter.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-4;
        for key in 0..model.params.len() {
            let n = model.params.get(key).len();
            let analytic = grads[key].as_ref().unwrap();
            for _ in 0..2 {
                let e = rng.random_range(0..n);
                let mut plus = model.params.clone();
                plus.get_mut(key).data[e] += h;
                let mut minus = model.params.clone();
                minus.get_mut(key).data[e] -= h;
                let fd = (loss_value(&plus) - loss_value(&minus)) / (2.0 * h);
                let a = analytic.data[e];
                let denom = a.abs().max(fd.abs()).max(1e-4);
                assert!(
                    (a - fd).abs() / denom <= 1e-3,
                    "param {} elem {e}: analytic {a} vs fd {fd}",
                    model.params.name(key)
                );
            }
        }
    }

    #[test]
    fn critic_gradients_match_finite_differences() {
        let tok = Tokenizer::for_corpus_vocab(6);
        let model = CriticModel::new(
            ModelDims {
                n_layers: 1,
                n_heads: 2,
                d_model: 8,
                max_context: 16,
            },
            tok,
            3,
        )
        .unwrap();
        let ids: Vec<u32> = vec![BOS, 9, 14, 30];
        let target = -7.5;

        let loss_value = |params: &ParamSet| -> f64 {
            let mut m = model.clone();
            m.params = params.clone();
            let mut g = Graph::new();
            let leaves = m.leaves(&mut g);
            let v = m.forward_on(&mut g, &leaves, &ids);
            let t = g.scalar_input(-target);
            let diff = g.add(v, t);
            let sq = g.mul(diff, diff);
            g.scalar_value(sq)
        };

        let mut g = Graph::new();
        let leaves = model.leaves(&mut g);
        let v = model.forward_on(&mut g, &leaves, &ids);
        let t = g.scalar_input(-target);
        let diff = g.add(v, t);
        let sq = g.mul(diff, diff);
        let grads = g.backward(sq, model.params.len()).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-4;
        for key in 0..model.params.len() {
            let n = model.params.get(key).len();
            let Some(analytic) = grads[key].as_ref() else {
                continue;
            };
            let e = rng.random_range(0..n);
            let mut plus = model.params.clone();
            plus.get_mut(key).data[e] += h;
            let mut minus = model.params.clone();
            minus.get_mut(key).data[e] -= h;
            let fd = (loss_value(&plus) - loss_value(&minus)) / (2.0 * h);
            let a = analytic.data[e];
            let denom = a.abs().max(fd.abs()).max(1e-4);
            assert!(
                (a - fd).abs() / denom <= 1e-3,
                "param {} elem {e}: analytic {a} vs fd {fd}",
                model.params.name(key)
            );
        }
    }

    #[test]
    fn model_checkpoint_roundtrip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.lctl");
        let tok = Tokenizer::for_corpus_vocab(6);
        let dims = ModelDims {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            max_context: 16,
        };
        let model = PolicyModel::new(dims, tok.clone(), 5).unwrap();
        model.save(&path).unwrap();
        let loaded = PolicyModel::load(&path).unwrap();
        assert_eq!(loaded.params.fingerprint(), model.params.fingerprint());
        let a = model.forward_logits(&[BOS, 9, 14]).unwrap();
        let b = loaded.forward_logits(&[BOS, 9, 14]).unwrap();
        assert_eq!(a, b);

        // Config mismatch on load-into-existing is rejected.
        let mut other = PolicyModel::new(
            ModelDims {
                n_layers: 2,
                n_heads: 2,
                d_model: 8,
                max_context: 16,
            },
            tok.clone(),
            6,
        )
        .unwrap();
        assert!(other.load_into(&path).is_err());

        // Kind mismatch: a critic checkpoint does not load as a policy.
        let critic = CriticModel::new(dims, tok, 7).unwrap();
        let cpath = dir.path().join("c.lctl");
        critic.save(&cpath).unwrap();
        assert!(PolicyModel::load(&cpath).is_err());
    }
}
