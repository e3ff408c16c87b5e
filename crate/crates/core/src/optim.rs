//! Adam with cosine learning-rate decay, keyed by parameter name.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::adapter::TrainableMask;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    state: BTreeMap<String, Moments>,
}

/// `lr0 · ½(1 + cos(π · step / total))`.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = (step.min(total)) as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (PI * frac).cos())
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Drops moment estimates of parameters the mask no longer trains.
    pub fn retain(&mut self, mask: &TrainableMask) {
        self.state.retain(|name, _| mask.is_trainable(name));
    }

    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.state.keys().map(String::as_str)
    }

    /// One Adam update of a single named array.
    pub fn update(&mut self, name: &str, data: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != data.len() {
            return Err(Error::invalid("adam", format!("gradient of {name} has wrong size")));
        }
        let cfg = self.config;
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; data.len()],
            v: vec![0.0; data.len()],
            t: 0,
        });
        st.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(st.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(st.t as i32);
        for (i, (p, &gi)) in data.iter_mut().zip(grad).enumerate() {
            st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * gi;
            st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = st.m[i] / bc1;
            let vh = st.v[i] / bc2;
            *p -= lr * mh / (vh.sqrt() + cfg.eps);
        }
        Ok(())
    }

    /// One update of every model parameter named in `grads`; all others
    /// stay untouched.
    pub fn step(&mut self, model: &mut Model, grads: &[(String, Tensor)], lr: f64) -> Result<()> {
        let by_name: BTreeMap<&str, &Tensor> = grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
        let mut result = Ok(());
        let mut seen = 0;
        model.visit_params_mut(&mut |name, data| {
            let Some(g) = by_name.get(name) else { return };
            seen += 1;
            if result.is_ok() {
                result = self.update(name, data, g.data(), lr);
            }
        });
        result?;
        if seen != by_name.len() {
            return Err(Error::invalid("adam", "gradient for an unknown parameter"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::FreezePolicy;
    use crate::p2l::{freeze_previous, PromptInit};
    use crate::tape::Tape;
    use crate::vit::ModelConfig;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(4e-4, 0, 100), 4e-4);
        assert!((cosine_lr(4e-4, 50, 100) - 2e-4).abs() < 1e-18);
        assert!(cosine_lr(4e-4, 100, 100).abs() < 1e-18);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut m = Model::new(ModelConfig::default(), None, false).unwrap();
        m.add_classes(&[0], 1, &PromptInit::Random { seed: 0 }).unwrap();
        let before = m.bank.entries()[0].bias;
        let mut adam = Adam::default();
        adam.config = AdamConfig::default();
        adam.step(&mut m, &[("head.0.bias".into(), Tensor::scalar(3.0))], 0.01).unwrap();
        assert!((m.bank.entries()[0].bias - (before - 0.01)).abs() < 1e-9);
    }

    #[test]
    fn masked_out_parameters_never_move() {
        let mut m = Model::new(ModelConfig::default(), None, true).unwrap();
        m.add_classes(&[0, 1], 1, &PromptInit::Random { seed: 0 }).unwrap();
        m.add_classes(&[2, 3], 2, &PromptInit::Random { seed: 0 }).unwrap();
        freeze_previous(&mut m.pool, &mut m.bank, 2);
        m.adapters.as_mut().unwrap().frozen = true;
        let mask = m.trainable_mask(2, FreezePolicy::default());
        let frozen = |n: &str| !mask.is_trainable(n);
        let mut adam = Adam::new(AdamConfig::default());
        let images = Tensor::full(vec![2, 16, 16], 0.1);
        for _ in 0..3 {
            let before = m.hash_params(frozen);
            let tape = Tape::new();
            let bound = m.bind(&tape, Some(&mask));
            let loss = bound.forward(&tape, &images, &m.config).unwrap().mean();
            tape.backward(loss).unwrap();
            let grads = bound.grads();
            adam.step(&mut m, &grads, 1e-2).unwrap();
            assert_eq!(before, m.hash_params(frozen));
        }
        let tracked: Vec<&str> = adam.tracked().collect();
        assert_eq!(tracked.len(), 6);
    }
}
