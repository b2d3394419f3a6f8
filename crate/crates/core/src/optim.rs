//! AdamW with linear warmup to a constant learning rate.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 5e-5, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.01, warmup_steps: 100 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    /// Learning rate of update number `step` (1-based): linear ramp over the
    /// warmup, constant afterwards.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

/// First and second moments of one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    /// Number of updates this parameter has received.
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Number of optimizer steps taken.
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, step: 0, moments: BTreeMap::new() })
    }

    /// Applies one update to every parameter that has a gradient. Parameters
    /// without a gradient are left untouched, weight decay included.
    /// Returns the learning rate used.
    pub fn step(&mut self, stores: &mut [&mut ParamStore], grads: &BTreeMap<String, Tensor>) -> Result<f64> {
        self.step += 1;
        let lr = self.config.lr_at(self.step);
        let AdamWConfig { beta1, beta2, eps, weight_decay, .. } = self.config;
        for store in stores.iter_mut() {
            for (name, p) in store.iter_mut() {
                let Some(g) = grads.get(name) else { continue };
                if g.shape() != p.shape() {
                    return Err(Error::Contract(format!(
                        "gradient for {name} has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
                let mo = self.moments.entry(name.into()).or_insert_with(|| Moments {
                    m: Tensor::zeros(p.shape()),
                    v: Tensor::zeros(p.shape()),
                    step: 0,
                });
                mo.step += 1;
                let c1 = 1.0 - libm::pow(beta1, mo.step as f64);
                let c2 = 1.0 - libm::pow(beta2, mo.step as f64);
                let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
                for (i, w) in p.data_mut().iter_mut().enumerate() {
                    let gi = g.data()[i];
                    *w -= lr * weight_decay * *w;
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                    *w -= lr * (m[i] / c1) / (libm::sqrt(v[i] / c2) + eps);
                }
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn warmup_schedule() {
        let c = AdamWConfig::default();
        assert!((c.lr_at(50) - 2.5e-5).abs() < 1e-20);
        assert_eq!(c.lr_at(100), 5e-5);
        assert_eq!(c.lr_at(10_000), 5e-5);
        assert!((c.lr_at(1) - 5e-7).abs() < 1e-20);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let config = AdamWConfig { lr: 0.1, warmup_steps: 0, ..Default::default() };
        let mut opt = AdamW::new(config).unwrap();
        let mut store = ParamStore::new();
        store.insert("a", Tensor::from_vec(&[2], vec![1.0, -2.0]));
        store.insert("frozen", Tensor::from_vec(&[1], vec![3.0]));
        let mut grads = BTreeMap::new();
        grads.insert("a".into(), Tensor::from_vec(&[2], vec![0.5, -0.25]));
        opt.step(&mut [&mut store], &grads).unwrap();
        // First step: m̂ = g, v̂ = g², so the Adam move is lr·sign(g) (up to eps).
        let want = [1.0 - 0.1 * 0.01 * 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 + 0.1 * 0.01 * 2.0 + 0.1 * 0.25 / (0.25 + 1e-8)];
        for (g, w) in store.get("a").unwrap().data().iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
        assert_eq!(store.get("frozen").unwrap().data(), [3.0]);
        assert!(!opt.moments.contains_key("frozen"));
    }

    #[test]
    fn minimizes_a_quadratic() {
        let config = AdamWConfig { lr: 0.05, weight_decay: 0.0, warmup_steps: 10, ..Default::default() };
        let mut opt = AdamW::new(config).unwrap();
        let mut store = ParamStore::new();
        store.insert("x", Tensor::from_vec(&[3], vec![2.0, -1.0, 0.5]));
        for _ in 0..500 {
            let g = store.get("x").unwrap().map(|v| 2.0 * (v - 0.3));
            let mut grads = BTreeMap::new();
            grads.insert("x".into(), g);
            opt.step(&mut [&mut store], &grads).unwrap();
        }
        assert!(store.get("x").unwrap().data().iter().all(|v| (v - 0.3).abs() < 1e-2));
    }
}
