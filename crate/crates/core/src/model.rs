//! The assembled classifier: backbone, optional adapters, prompt pool and
//! classifier bank, plus named-parameter access for optimizers, hashing and
//! checkpoints.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{
    attach_adapters, compute_trainable_mask, head_bias_name, head_weight_name, prompt_name,
    AdapterParams, FreezePolicy, TrainableMask,
};
use crate::error::{Error, Result};
use crate::p2l::{add_class_prompts, classify, ClassifierBank, PromptInit, PromptPool};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vit::{encoder_forward, EncoderParams, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub adapters: Option<AdapterParams>,
    pub pool: PromptPool,
    pub bank: ClassifierBank,
}

/// Model parameters bound to a tape for one forward/backward pass.
pub struct BoundModel<'t> {
    pub encoder: EncoderParams<Var<'t>>,
    pub adapters: Option<AdapterParams<Var<'t>>>,
    /// `[n, d]`, rows in ascending class order.
    pub prompts: Option<Var<'t>>,
    pub head_weights: Option<Var<'t>>,
    pub head_biases: Option<Var<'t>>,
    pub class_ids: Vec<usize>,
    trainable: TrainableMask,
}

impl Model {
    /// A fresh model; `backbone` replaces the randomly initialized encoder.
    pub fn new(config: ModelConfig, backbone: Option<EncoderParams>, with_adapters: bool) -> Result<Self> {
        config.validate()?;
        let encoder = match backbone {
            Some(b) => {
                let fresh = EncoderParams::init(&config)?;
                let mut shapes = Vec::new();
                fresh.visit(&mut |n, t| shapes.push((n.to_string(), t.shape().to_vec())));
                let mut i = 0;
                let mut ok = true;
                b.visit(&mut |n, t| {
                    ok &= shapes.get(i).is_some_and(|(sn, ss)| sn == n && ss == t.shape());
                    i += 1;
                });
                if !ok || i != shapes.len() {
                    return Err(Error::Config("backbone does not match the model config".into()));
                }
                b
            }
            None => EncoderParams::init(&config)?,
        };
        let adapters = if with_adapters {
            Some(attach_adapters(&config)?)
        } else {
            None
        };
        Ok(Self {
            pool: PromptPool::new(config.dim),
            bank: ClassifierBank::new(config.dim),
            config,
            encoder,
            adapters,
        })
    }

    pub fn add_classes(&mut self, classes: &[usize], stage: usize, init: &PromptInit<'_>) -> Result<()> {
        add_class_prompts(&mut self.pool, &mut self.bank, classes, stage, init)
    }

    pub fn trainable_mask(&self, stage: usize, policy: FreezePolicy) -> TrainableMask {
        compute_trainable_mask(
            stage,
            &self.encoder,
            self.adapters.as_ref(),
            &self.pool,
            &self.bank,
            policy,
        )
    }

    /// Walks every parameter array as a flat slice, in a fixed order:
    /// encoder, adapters, prompts, head weights and biases per class.
    pub fn visit_params(&self, f: &mut impl FnMut(&str, &[usize], &[f64])) {
        self.encoder.visit(&mut |n, t| f(n, t.shape(), t.data()));
        if let Some(a) = &self.adapters {
            a.visit(&mut |n, t| f(n, t.shape(), t.data()));
        }
        for p in self.pool.entries() {
            f(&prompt_name(p.class_id), p.vector.shape(), p.vector.data());
        }
        for h in self.bank.entries() {
            f(&head_weight_name(h.class_id), h.weight.shape(), h.weight.data());
            f(&head_bias_name(h.class_id), &[], std::slice::from_ref(&h.bias));
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&str, &mut [f64])) {
        self.encoder.visit_mut(&mut |n, t| f(n, t.data_mut()));
        if let Some(a) = &mut self.adapters {
            a.visit_mut(&mut |n, t| f(n, t.data_mut()));
        }
        for p in self.pool.entries_mut() {
            f(&prompt_name(p.class_id), p.vector.data_mut());
        }
        for h in self.bank.entries_mut() {
            f(&head_weight_name(h.class_id), h.weight.data_mut());
            f(&head_bias_name(h.class_id), std::slice::from_mut(&mut h.bias));
        }
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _, d| n += d.len());
        n
    }

    /// Hex SHA-256 over names and little-endian values of the selected
    /// parameters.
    pub fn hash_params(&self, select: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        self.visit_params(&mut |name, _, data| {
            if select(name) {
                h.update(name.as_bytes());
                for v in data {
                    h.update(v.to_le_bytes());
                }
            }
        });
        hex::encode(h.finalize())
    }

    /// Binds parameters as tape leaves; those trainable under `mask` track
    /// gradients. Prompt and head rows share one leaf per family, which
    /// tracks gradients when any of its rows is trainable.
    pub fn bind<'t>(&self, tape: &'t Tape, mask: Option<&TrainableMask>) -> BoundModel<'t> {
        let on = |name: &str| mask.is_some_and(|m| m.is_trainable(name));
        let encoder = self.encoder.map(&mut |n, t| tape.leaf(t.clone(), on(n)));
        let adapters = self
            .adapters
            .as_ref()
            .map(|a| a.map(&mut |n, t| tape.leaf(t.clone(), on(n))));
        let class_ids = self.pool.class_ids();
        let (prompts, head_weights, head_biases) = if class_ids.is_empty() {
            (None, None, None)
        } else {
            let any = |f: fn(usize) -> String| class_ids.iter().any(|&c| on(&f(c)));
            let (w, b) = self.bank.matrices();
            (
                Some(tape.leaf(self.pool.matrix().expect("non-empty pool"), any(prompt_name))),
                Some(tape.leaf(w, any(head_weight_name))),
                Some(tape.leaf(b, any(head_bias_name))),
            )
        };
        BoundModel {
            encoder,
            adapters,
            prompts,
            head_weights,
            head_biases,
            class_ids,
            trainable: mask.cloned().unwrap_or_default(),
        }
    }

    /// Logits `[B, n]` for `[B, H, W]` images, columns in ascending class
    /// order.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, None);
        Ok(bound.forward(&tape, images, &self.config)?.value())
    }

    /// Sigmoid probabilities `[B, n]`.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let logits = self.logits(images)?;
        let shape = logits.shape().to_vec();
        let probs = logits.into_data().into_iter().map(sigmoid).collect();
        Tensor::new(shape, probs)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl<'t> BoundModel<'t> {
    pub fn forward(&self, tape: &'t Tape, images: &Tensor, cfg: &ModelConfig) -> Result<Var<'t>> {
        let (Some(p), Some(w), Some(b)) = (&self.prompts, &self.head_weights, &self.head_biases) else {
            return Err(Error::invalid("forward", "model has no classes"));
        };
        let out = encoder_forward(tape, images, Some(p), &self.encoder, self.adapters.as_ref(), cfg)?;
        classify(&out.prompts, w, b)
    }

    /// Gradients of every trainable parameter after `backward`, keyed by
    /// parameter name.
    pub fn grads(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut take = |name: &str, v: &Var<'t>| {
            if self.trainable.is_trainable(name) {
                if let Some(g) = v.grad() {
                    out.push((name.to_string(), g));
                }
            }
        };
        self.encoder.visit(&mut |n, v| take(n, v));
        if let Some(a) = &self.adapters {
            a.visit(&mut |n, v| take(n, v));
        }
        let rows = |v: &Option<Var<'t>>| v.as_ref().and_then(|v| v.grad());
        let (gp, gw, gb) = (rows(&self.prompts), rows(&self.head_weights), rows(&self.head_biases));
        for (i, &c) in self.class_ids.iter().enumerate() {
            for (name, g) in [(prompt_name(c), &gp), (head_weight_name(c), &gw)] {
                if let (true, Some(g)) = (self.trainable.is_trainable(&name), g) {
                    out.push((name, Tensor::from_vec(g.row(i).to_vec())));
                }
            }
            if let (true, Some(g)) = (self.trainable.is_trainable(&head_bias_name(c)), &gb) {
                out.push((head_bias_name(c), Tensor::scalar(g.data()[i])));
            }
        }
        out
    }
}
