use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::{Param, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Polynomial decay exponent: `lr * (1 - iter / max_iters)^power`. Off when absent.
    pub poly_power: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.9, weight_decay: 5e-4, poly_power: None }
    }
}

impl SgdConfig {
    pub fn discriminator_default() -> Self {
        Self { lr: 0.001, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config_err(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err(format!("momentum must be within [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err("weight_decay must be non-negative"));
        }
        if let Some(p) = self.poly_power {
            if !(p > 0.0) {
                return Err(config_err("poly_power must be positive"));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, iter: usize, max_iters: usize) -> f64 {
        match self.poly_power {
            Some(p) if max_iters > 0 => self.lr * (1.0 - iter.min(max_iters) as f64 / max_iters as f64).powf(p),
            _ => self.lr,
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v = momentum * v + (grad + wd * theta)`, `theta -= lr * v`.
///
/// Velocities are keyed by parameter name, so one optimizer can drive any
/// subset of the networks.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: HashMap<String, Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Self { config, velocity: HashMap::new() }
    }

    pub fn step<'a, I>(&mut self, params: I, lr: f64)
    where
        I: IntoIterator<Item = &'a mut Param<T>>,
    {
        let lr = T::lit(lr);
        let mu = T::lit(self.config.momentum);
        let wd = T::lit(self.config.weight_decay);
        for p in params {
            let v = self.velocity.entry(p.name.clone()).or_insert_with(|| vec![T::zero(); p.value.len()]);
            for ((theta, &g), v) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *v = mu * *v + g + wd * *theta;
                *theta = *theta - lr * *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut p = Param::<f32>::new("w", vec![3], vec![1.0, -2.0, 0.5]);
        p.grad = vec![0.3, 0.1, -4.0];
        let mut opt = Sgd::new(SgdConfig::default());
        opt.step([&mut p], 0.0);
        assert_eq!(p.value, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn momentum_recurrence() {
        let cfg = SgdConfig { lr: 0.1, momentum: 0.5, weight_decay: 0.0, poly_power: None };
        let mut opt = Sgd::new(cfg);
        let mut p = Param::<f64>::new("w", vec![1], vec![1.0]);
        p.grad = vec![1.0];
        opt.step([&mut p], 0.1);
        assert!((p.value[0] - 0.9).abs() < 1e-15);
        opt.step([&mut p], 0.1);
        // v = 0.5 * 1 + 1 = 1.5
        assert!((p.value[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.5, poly_power: None };
        let mut p = Param::<f64>::new("w", vec![1], vec![2.0]);
        Sgd::new(cfg).step([&mut p], 0.1);
        assert!((p.value[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn poly_schedule() {
        let cfg = SgdConfig { poly_power: Some(0.9), ..SgdConfig::default() };
        assert_eq!(cfg.lr_at(0, 100), 0.01);
        assert_eq!(cfg.lr_at(100, 100), 0.0);
        assert!((cfg.lr_at(50, 100) - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert_eq!(SgdConfig::default().lr_at(50, 100), 0.01);
    }
}
