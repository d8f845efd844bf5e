//! Adam with decoupled weight decay and a staircase learning rate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Grads, Model, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// The rate is multiplied by `decay_factor` every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Weight of occluded and void supervision in the grouped loss.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Small-scale defaults suited to CPU training.
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 30,
            learning_rate: 1e-3,
            decay_every: 10,
            decay_factor: 0.1,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lambda: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("decay_factor", self.decay_factor),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive"));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 || self.decay_every == 0 {
            return Err("batch_size, epochs and decay_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("betas must lie in [0, 1)".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.lambda >= 0.0) {
            return Err("weight_decay and lambda must be non-negative".into());
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in block {block} at index {index} (value {value})")]
    NonFinite { block: String, index: usize, value: f64 },
    #[error("gradient layout does not match the model")]
    Shape,
}

/// First and second moment estimates per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new<T: Scalar>(model: &Model<T>) -> Self {
        let zeros: Vec<Vec<f32>> = model.blocks.iter().map(|b| vec![0.0; b.data.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update: `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    pub fn update<T: Scalar>(
        &mut self,
        model: &mut Model<T>,
        grads: &Grads<T>,
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<(), OptimError> {
        if grads.len() != model.blocks.len()
            || self.m.len() != grads.len()
            || grads.iter().zip(&model.blocks).any(|(g, b)| g.len() != b.data.len())
        {
            return Err(OptimError::Shape);
        }
        for (g, b) in grads.iter().zip(&model.blocks) {
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(OptimError::NonFinite {
                    block: b.name.clone(),
                    index,
                    value: g[index].to_f64(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (bi, block) in model.blocks.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[bi], &mut self.v[bi]);
            for (k, p) in block.data.iter_mut().enumerate() {
                let g = grads[bi][k].to_f64();
                let mk = cfg.beta1 * m[k] as f64 + (1.0 - cfg.beta1) * g;
                let vk = cfg.beta2 * v[k] as f64 + (1.0 - cfg.beta2) * g * g;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let pv = p.to_f64();
                let upd = (mk / c1) / ((vk / c2).sqrt() + cfg.epsilon) + cfg.weight_decay * pv;
                *p = T::from_f64(pv - lr * upd);
            }
        }
        model.bump_version();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Mode, ModelConfig};

    fn tiny() -> Model<f64> {
        let cfg = ModelConfig {
            input_channels: 1,
            base_width: 2,
            levels: 1,
            norm_eps: 1e-5,
            mode: Mode::Dss,
            output_channels: 2,
            output_sigmoid: false,
            normalize_stem: false,
            input_mean: 0.0,
            input_std: 1.0,
        };
        Model::new(cfg, 3).unwrap()
    }

    #[test]
    fn staircase_schedule() {
        let c = TrainConfig::default();
        for e in 0..10 {
            assert_eq!(c.learning_rate_at(e), 1e-3);
        }
        for e in 10..20 {
            assert!((c.learning_rate_at(e) - 1e-4).abs() < 1e-18);
        }
        assert!((c.learning_rate_at(25) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut model = tiny();
        let before = model.blocks.clone();
        let mut adam = Adam::new(&model);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let g = model.zero_grads();
        adam.update(&mut model, &g, 1e-3, &cfg).unwrap();
        assert_eq!(model.blocks, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn step_decreases_quadratic() {
        // f(p) = sum (p - 1)^2 over every parameter
        let mut model = tiny();
        let f = |m: &Model<f64>| -> f64 { m.blocks.iter().flat_map(|b| &b.data).map(|p| (p - 1.0).powi(2)).sum() };
        let before = f(&model);
        let g: Grads<f64> = model
            .blocks
            .iter()
            .map(|b| b.data.iter().map(|p| 2.0 * (p - 1.0)).collect())
            .collect();
        let mut adam = Adam::new(&model);
        adam.update(&mut model, &g, 1e-2, &TrainConfig::default()).unwrap();
        assert!(f(&model) < before);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut model = tiny();
        let mut g = model.zero_grads();
        let bi = g.iter().position(|b| b.len() > 2).unwrap();
        g[bi][2] = f64::NAN;
        let mut adam = Adam::new(&model);
        let err = adam.update(&mut model, &g, 1e-3, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, OptimError::NonFinite { index: 2, .. }));
        assert_eq!(adam.step, 0);
    }
}
