//! Adam with explicit, serializable moment state.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of `store` that has a gradient.
    /// Parameters without a gradient keep their value and moments.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, p) in store.iter() {
            let Some(g) = grads.get(p.var.as_tensor()) else { continue };
            // gradients carry the op graph of the backward pass; keeping them
            // (or moments built from them) would retain every past graph
            let g = &g.detach();
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (((m * beta1)? + (g * (1.0 - beta1))?)?, ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?),
                None => ((g * (1.0 - beta1))?, (g.sqr()? * (1.0 - beta2))?),
            };
            let denom = ((&v / c2)?.sqrt()? + eps)?;
            let update = ((&m / c1)?.div(&denom)? * lr)?;
            p.var.set(&p.var.as_tensor().sub(&update)?)?;
            self.moments.insert(name.clone(), (m.detach(), v.detach()));
        }
        Ok(())
    }

    /// Flattens the state into named tensors under `prefix`.
    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.moments.len());
        for (name, (m, v)) in &self.moments {
            out.push((format!("{prefix}.m/{name}"), m.clone()));
            out.push((format!("{prefix}.v/{name}"), v.clone()));
        }
        out
    }

    pub fn load_state(&mut self, prefix: &str, step: u64, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let m_prefix = format!("{prefix}.m/");
        let mut moments = BTreeMap::new();
        for (key, m) in tensors.range(m_prefix.clone()..) {
            let Some(name) = key.strip_prefix(&m_prefix) else { break };
            let v = tensors
                .get(&format!("{prefix}.v/{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for `{name}` lacks a second moment")))?;
            moments.insert(name.to_string(), (m.clone(), v.clone()));
        }
        self.moments = moments;
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let w = store.weight("w", &[3], &mut rng).unwrap();
        let before: Vec<f64> = w.as_tensor().to_vec1().unwrap();
        let loss = (w.as_tensor() * Tensor::new(&[2.0f64, -3.0, 0.5], &Device::Cpu).unwrap()).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&store, &grads).unwrap();
        let after: Vec<f64> = w.as_tensor().to_vec1().unwrap();
        let expected = [-2e-4, 2e-4, -2e-4];
        for i in 0..3 {
            assert!((after[i] - before[i] - expected[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn minimizes_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let w = store.weight("w", &[4], &mut rng).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..AdamConfig::default() });
        for _ in 0..500 {
            let loss = (w.as_tensor() - 1.0).unwrap().sqr().unwrap().sum_all().unwrap();
            opt.step(&store, &loss.backward().unwrap()).unwrap();
        }
        for v in w.as_tensor().to_vec1::<f64>().unwrap() {
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn state_round_trip_continues_identically() {
        let run = |split: bool| -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut store = ParamStore::new(DType::F64, Device::Cpu);
            let w = store.weight("w", &[3], &mut rng).unwrap();
            let mut opt = Adam::new(AdamConfig::default());
            for i in 0..6 {
                if split && i == 3 {
                    let tensors: BTreeMap<_, _> = opt.state_tensors("g").into_iter().collect();
                    let step = opt.step_count();
                    opt = Adam::new(AdamConfig::default());
                    opt.load_state("g", step, &tensors).unwrap();
                }
                let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
                opt.step(&store, &loss.backward().unwrap()).unwrap();
            }
            w.as_tensor().to_vec1().unwrap()
        };
        assert_eq!(run(false), run(true));
    }
}
