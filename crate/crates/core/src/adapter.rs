//! Continual adapters and the stage-gated trainable mask.
//!
//! An adapter is a bottleneck `Linear(d→d′) → ReLU → Linear(d′→d)` running
//! parallel to the MLP of each layer in `adapter_start..=layers`. Adapters
//! train only in the first stage; afterwards only the prompts and heads of
//! the current task move.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::p2l::{ClassifierBank, PromptPool};
use crate::params::param_group;
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::vit::{EncoderParams, ModelConfig};

param_group! {
    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct AdapterLayer {
        pub down_weight,
        pub down_bias,
        pub up_weight,
        pub up_bias,
    }
}

/// Adapters for layers `start..=start + layers.len() - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams<T = Tensor> {
    pub start: usize,
    pub layers: Vec<AdapterLayer<T>>,
    pub frozen: bool,
}

impl<T> AdapterParams<T> {
    /// Adapter of 1-indexed encoder layer `layer`, if that layer has one.
    pub fn layer(&self, layer: usize) -> Option<&AdapterLayer<T>> {
        layer
            .checked_sub(self.start)
            .and_then(|i| self.layers.get(i))
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> AdapterParams<U> {
        AdapterParams {
            start: self.start,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("adapter.layer{}", self.start + i), f))
                .collect(),
            frozen: self.frozen,
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(&str, &T)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("adapter.layer{}", self.start + i), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut T)) {
        let start = self.start;
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("adapter.layer{}", start + i), f);
        }
    }
}

/// One adapter per layer `m..=L`: Gaussian (std 0.02) down-projection,
/// zero up-projection and zero biases, so a fresh adapter outputs zero.
pub fn attach_adapters(cfg: &ModelConfig) -> Result<AdapterParams> {
    let (m, l, d, b) = (cfg.adapter_start, cfg.layers, cfg.dim, cfg.bottleneck);
    if m < 1 || m > l {
        return Err(Error::Config(format!(
            "adapter_start must satisfy 1 <= m <= {l} (got {m})"
        )));
    }
    if b < 1 || b >= d {
        return Err(Error::Config(format!(
            "bottleneck must satisfy 1 <= d' < {d} (got {b})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xada9_7e55);
    let layers = (m..=l)
        .map(|_| AdapterLayer {
            down_weight: Tensor::randn(vec![d, b], 0.02, &mut rng),
            down_bias: Tensor::zeros(vec![b]),
            up_weight: Tensor::zeros(vec![b, d]),
            up_bias: Tensor::zeros(vec![d]),
        })
        .collect();
    Ok(AdapterParams {
        start: m,
        layers,
        frozen: false,
    })
}

/// `y_a = ReLU(x_a W_dn + b_dn) W_up + b_up`, same shape as `x_a`.
pub fn adapter_forward<'t>(x: &Var<'t>, p: &AdapterLayer<Var<'t>>) -> Result<Var<'t>> {
    let shape = x.shape();
    let d_in = p.down_weight.shape()[0];
    if shape.last() != Some(&d_in) {
        return Err(Error::shape("adapter_forward", &shape, &p.down_weight.shape()));
    }
    let hidden = x.matmul(&p.down_weight)?.add(&p.down_bias)?.relu();
    hidden.matmul(&p.up_weight)?.add(&p.up_bias)
}

/// Which parameter families may move beyond the default policy.
///
/// The default (everything `false`) is the two-stage paradigm: adapters in
/// stage 1 only, prompts and heads only during their own stage, backbone
/// never. The flags reproduce the freezing ablations and the fine-tuning
/// baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub backbone_trainable: bool,
    pub ca_unfrozen: bool,
    pub prompts_unfrozen: bool,
    pub heads_unfrozen: bool,
}

impl FreezePolicy {
    pub fn fine_tuning() -> Self {
        Self {
            backbone_trainable: true,
            ca_unfrozen: true,
            prompts_unfrozen: true,
            heads_unfrozen: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct MaskEntry {
    trainable: bool,
    scalars: usize,
}

/// Trainable flag for every named parameter array of the model.
///
/// Prompt and head names are `prompt.{class}`, `head.{class}.weight` and
/// `head.{class}.bias`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableMask {
    entries: BTreeMap<String, MaskEntry>,
}

impl TrainableMask {
    fn insert(&mut self, name: &str, scalars: usize, trainable: bool) {
        self.entries
            .insert(name.to_string(), MaskEntry { trainable, scalars });
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.as_str())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.scalars)
            .sum()
    }
}

pub fn prompt_name(class_id: usize) -> String {
    format!("prompt.{class_id}")
}

pub fn head_weight_name(class_id: usize) -> String {
    format!("head.{class_id}.weight")
}

pub fn head_bias_name(class_id: usize) -> String {
    format!("head.{class_id}.bias")
}

/// Mask for `stage` (1-indexed). Expects [`freeze_previous`](crate::p2l::freeze_previous)
/// to have run for this stage.
pub fn compute_trainable_mask(
    stage: usize,
    encoder: &EncoderParams,
    adapters: Option<&AdapterParams>,
    pool: &PromptPool,
    bank: &ClassifierBank,
    policy: FreezePolicy,
) -> TrainableMask {
    let mut mask = TrainableMask::default();
    encoder.visit(&mut |name, t| mask.insert(name, t.len(), policy.backbone_trainable));
    if let Some(a) = adapters {
        let on = (stage <= 1 && !a.frozen) || policy.ca_unfrozen;
        a.visit(&mut |name, t| mask.insert(name, t.len(), on));
    }
    for p in pool.entries() {
        mask.insert(
            &prompt_name(p.class_id),
            p.vector.len(),
            !p.frozen || policy.prompts_unfrozen,
        );
    }
    for h in bank.entries() {
        let on = !h.frozen || policy.heads_unfrozen;
        mask.insert(&head_weight_name(h.class_id), h.weight.len(), on);
        mask.insert(&head_bias_name(h.class_id), 1, on);
    }
    mask
}
