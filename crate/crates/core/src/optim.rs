//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::Param;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments keyed by parameter name, so the state survives
/// a round trip through a checkpoint and a rebuilt model.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            ..Self::default()
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `params` that has a gradient.
    /// Parameters without one (unused this step) are left untouched.
    pub fn step(&mut self, params: &[Param], grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let correct1 = 1.0 - beta1.powi(t);
        let correct2 = 1.0 - beta2.powi(t);
        for p in params {
            let Some(g) = grads.get(p.var().as_tensor()) else { continue };
            // Gradients can carry op history; the moments must not keep it alive.
            let g = g.detach();
            let g = &g;
            let name = p.name().to_string();
            let m = match self.first.get(&name) {
                Some(m) => ((m * beta1)? + (g * (1.0 - beta1))?)?,
                None => (g * (1.0 - beta1))?,
            };
            let v = match self.second.get(&name) {
                Some(v) => ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?,
                None => (g.sqr()? * (1.0 - beta2))?,
            };
            let m_hat = (&m / correct1)?;
            let v_hat = (&v / correct2)?;
            let w = p.value();
            let decayed = (&w * (1.0 - lr * weight_decay))?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            p.set(&(decayed - (update * lr)?)?)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name, v);
        }
        Ok(())
    }

    /// Moments as a flat tensor map under `m/<name>` and `v/<name>`.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.first {
            out.insert(format!("m/{k}"), t.clone());
        }
        for (k, t) in &self.second {
            out.insert(format!("v/{k}"), t.clone());
        }
        out
    }

    pub fn load_state(cfg: AdamConfig, step: u64, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut adam = Self::new(cfg);
        adam.step = step;
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix("m/") {
                adam.first.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("v/") {
                adam.second.insert(name.to_string(), t.clone());
            } else {
                return Err(Error::Checkpoint(format!("unexpected optimizer entry {k}")));
            }
        }
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamStore};
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_moves_each_weight_by_lr_times_sign() -> Result<()> {
        let store = ParamStore::new(DType::F64);
        let b = store.builder("", ChaCha8Rng::seed_from_u64(0));
        let p = b.param("w", 3, Init::Zeros)?;
        p.set(&Tensor::new(&[1.0f64, -2.0, 3.0], &Device::Cpu)?)?;
        let loss = (p.tensor() * Tensor::new(&[2.0f64, -1.0, 0.5], &Device::Cpu)?)?.sum_all()?;
        let grads = loss.backward()?;
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        adam.step(&[p.clone()], &grads, 0.1)?;
        let got = p.value().to_vec1::<f64>()?;
        let want = [0.9, -1.9, 2.9];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-6, "{got:?}");
        }
        Ok(())
    }

    #[test]
    fn decay_is_decoupled_from_the_gradient() -> Result<()> {
        let store = ParamStore::new(DType::F64);
        let b = store.builder("", ChaCha8Rng::seed_from_u64(0));
        let p = b.param("w", 1, Init::Ones)?;
        let unused = b.param("u", 1, Init::Ones)?;
        // A present but exactly zero gradient: only the decay acts.
        let loss = (p.tensor() - p.value())?.sqr()?.sum_all()?;
        let grads = loss.backward()?;
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 0.5,
            ..AdamConfig::default()
        });
        adam.step(&[p.clone(), unused.clone()], &grads, 0.1)?;
        assert!((p.value().to_vec1::<f64>()?[0] - 0.95).abs() < 1e-12);
        assert_eq!(unused.value().to_vec1::<f64>()?[0], 1.0);
        Ok(())
    }

    #[test]
    fn state_round_trip_continues_identically() -> Result<()> {
        let run = |split: bool| -> Result<Vec<f64>> {
            let store = ParamStore::new(DType::F64);
            let b = store.builder("", ChaCha8Rng::seed_from_u64(0));
            let p = b.param("w", 2, Init::Ones)?;
            let target = Tensor::new(&[0.3f64, -0.7], &Device::Cpu)?;
            let mut adam = Adam::new(AdamConfig::default());
            for i in 0..6 {
                if split && i == 3 {
                    adam = Adam::load_state(*adam.config(), adam.steps_taken(), &adam.state())?;
                }
                let loss = (p.tensor() - &target)?.sqr()?.sum_all()?;
                adam.step(&[p.clone()], &loss.backward()?, 0.05)?;
            }
            Ok(p.value().to_vec1::<f64>()?)
        };
        assert_eq!(run(false)?, run(true)?);
        Ok(())
    }
}
