//! AdamW with decoupled weight decay. No learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::Tensor;
use crate::nn::model::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> AdamW {
        let m = (0..params.len())
            .map(|k| vec![0.0; params.get(k).len()])
            .collect();
        let v = (0..params.len())
            .map(|k| vec![0.0; params.get(k).len()])
            .collect();
        AdamW {
            cfg,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are only decayed
    /// through their moments staying put (i.e. untouched). Non-finite
    /// gradients are rejected with the parameter name.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
        assert_eq!(grads.len(), params.len(), "gradient/parameter count");
        for (key, grad) in grads.iter().enumerate() {
            if let Some(g) = grad {
                if g.data.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        param: params.name(key).to_string(),
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (key, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let p = params.get_mut(key);
            let m = &mut self.m[key];
            let v = &mut self.v[key];
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p.data[i]);
            }
            // Keep parameters exactly f32-representable for checkpoints.
            p.quantize_f32();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_with(data: Vec<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_vec(1, data.len(), data));
        p
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params() {
        let mut params = params_with(vec![0.5, -0.25]);
        let mut opt = AdamW::new(AdamConfig::default(), &params);
        let grads = vec![Some(Tensor::from_vec(1, 2, vec![0.0, 0.0]))];
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params.get(0).data, vec![0.5, -0.25]);
    }

    #[test]
    fn nan_gradient_rejected_with_name() {
        let mut params = params_with(vec![0.5]);
        let mut opt = AdamW::new(AdamConfig::default(), &params);
        let grads = vec![Some(Tensor::from_vec(1, 1, vec![f64::NAN]))];
        let err = opt.step(&mut params, &grads).unwrap_err();
        match err {
            Error::NonFiniteGradient { param } => assert_eq!(param, "w"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let mut params = params_with(vec![1.0]);
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut opt = AdamW::new(cfg, &params);
        let grads = vec![Some(Tensor::from_vec(1, 1, vec![0.5]))];
        opt.step(&mut params, &grads).unwrap();
        // First step: mhat = g, vhat = g^2  =>  p -= lr * g/(|g| + eps).
        let expected = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8));
        assert!((params.get(0).data[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn decoupled_weight_decay() {
        let mut params = params_with(vec![2.0]);
        let cfg = AdamConfig {
            lr: 0.01,
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &params);
        let grads = vec![Some(Tensor::from_vec(1, 1, vec![0.0]))];
        opt.step(&mut params, &grads).unwrap();
        // Zero gradient: only the decay term applies (f32 rounding aside).
        let expected = 2.0 - 0.01 * 0.1 * 2.0;
        assert!((params.get(0).data[0] - expected).abs() < 1e-6);
    }
}
