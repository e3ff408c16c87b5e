//! Tiny pre-norm Vision Transformer with class-prompt injection.
//!
//! Layers are 1-indexed. Layers `1..=prompt_layer` see only the patch
//! tokens; the prompt tokens are prepended afterwards and the remaining
//! layers run on `n + N` tokens. Adapters, when present, sit parallel to the
//! MLP in layers `adapter_start..=layers`. There is no class token and
//! prompts carry no positional embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{adapter_forward, AdapterLayer, AdapterParams};
use crate::error::{Error, Result};
use crate::params::param_group;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub image_side: usize,
    pub patch_side: usize,
    pub mlp_ratio: usize,
    /// Prompts are concatenated after this layer (`k`).
    pub prompt_layer: usize,
    /// First layer carrying an adapter (`m`).
    pub adapter_start: usize,
    /// Adapter bottleneck width (`d′`).
    pub bottleneck: usize,
    pub ln_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            layers: 4,
            heads: 4,
            image_side: 16,
            patch_side: 4,
            mlp_ratio: 4,
            prompt_layer: 2,
            adapter_start: 3,
            bottleneck: 8,
            ln_eps: 1e-5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return fail("dim, layers, heads and mlp_ratio must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.patch_side == 0 || self.image_side % self.patch_side != 0 {
            return fail(format!(
                "image_side {} not divisible by patch_side {}",
                self.image_side, self.patch_side
            ));
        }
        if self.prompt_layer < 1 || self.prompt_layer >= self.layers {
            return fail(format!(
                "prompt_layer must satisfy 1 <= k < {} (got {})",
                self.layers, self.prompt_layer
            ));
        }
        if !(self.ln_eps > 0.0) {
            return fail("ln_eps must be positive".into());
        }
        Ok(())
    }

    /// Patch-token count `N`.
    pub fn tokens(&self) -> usize {
        let g = self.image_side / self.patch_side;
        g * g
    }

    pub fn patch_len(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }
}

param_group! {
    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct BlockParams {
        pub ln1_gamma,
        pub ln1_beta,
        pub wq,
        pub bq,
        pub wk,
        pub bk,
        pub wv,
        pub bv,
        pub wo,
        pub bo,
        pub ln2_gamma,
        pub ln2_beta,
        pub w1,
        pub b1,
        pub w2,
        pub b2,
    }
}

impl BlockParams {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, h) = (cfg.dim, cfg.hidden());
        let mut w = |r, c| Tensor::trunc_normal(vec![r, c], INIT_STD, rng);
        let (wq, wk, wv, wo) = (w(d, d), w(d, d), w(d, d), w(d, d));
        let (w1, w2) = (w(d, h), w(h, d));
        Self {
            ln1_gamma: Tensor::full(vec![d], 1.0),
            ln1_beta: Tensor::zeros(vec![d]),
            wq,
            bq: Tensor::zeros(vec![d]),
            wk,
            bk: Tensor::zeros(vec![d]),
            wv,
            bv: Tensor::zeros(vec![d]),
            wo,
            bo: Tensor::zeros(vec![d]),
            ln2_gamma: Tensor::full(vec![d], 1.0),
            ln2_beta: Tensor::zeros(vec![d]),
            w1,
            b1: Tensor::zeros(vec![h]),
            w2,
            b2: Tensor::zeros(vec![d]),
        }
    }
}

/// Backbone parameters `φ_I`: patch projection, positional embeddings for
/// the patch tokens, `L` blocks and the final norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams<T = Tensor> {
    pub patch_weight: T,
    pub patch_bias: T,
    pub pos_embed: T,
    pub blocks: Vec<BlockParams<T>>,
    pub final_gamma: T,
    pub final_beta: T,
    /// Set once the backbone is treated as pretrained.
    pub frozen: bool,
}

impl EncoderParams {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.dim;
        let patch_weight = Tensor::trunc_normal(vec![cfg.patch_len(), d], INIT_STD, &mut rng);
        let pos_embed = Tensor::trunc_normal(vec![cfg.tokens(), d], INIT_STD, &mut rng);
        let blocks = (0..cfg.layers).map(|_| BlockParams::init(cfg, &mut rng)).collect();
        Ok(Self {
            patch_weight,
            patch_bias: Tensor::zeros(vec![d]),
            pos_embed,
            blocks,
            final_gamma: Tensor::full(vec![d], 1.0),
            final_beta: Tensor::zeros(vec![d]),
            frozen: false,
        })
    }
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> EncoderParams<U> {
        EncoderParams {
            patch_weight: f("encoder.patch_weight", &self.patch_weight),
            patch_bias: f("encoder.patch_bias", &self.patch_bias),
            pos_embed: f("encoder.pos_embed", &self.pos_embed),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("encoder.block{}", i + 1), f))
                .collect(),
            final_gamma: f("encoder.final_gamma", &self.final_gamma),
            final_beta: f("encoder.final_beta", &self.final_beta),
            frozen: self.frozen,
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(&str, &T)) {
        f("encoder.patch_weight", &self.patch_weight);
        f("encoder.patch_bias", &self.patch_bias);
        f("encoder.pos_embed", &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("encoder.block{}", i + 1), f);
        }
        f("encoder.final_gamma", &self.final_gamma);
        f("encoder.final_beta", &self.final_beta);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut T)) {
        f("encoder.patch_weight", &mut self.patch_weight);
        f("encoder.patch_bias", &mut self.patch_bias);
        f("encoder.pos_embed", &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("encoder.block{}", i + 1), f);
        }
        f("encoder.final_gamma", &mut self.final_gamma);
        f("encoder.final_beta", &mut self.final_beta);
    }
}

/// Cuts `[B, H, W]` (or `[H, W]`) images into non-overlapping patches,
/// returning `[B, N, patch_side²]` with patches in row-major grid order.
pub fn extract_patches(images: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let s = cfg.image_side;
    let shape = images.shape();
    let batch = match shape {
        [h, w] if *h == s && *w == s => 1,
        [b, h, w] if *h == s && *w == s => *b,
        _ => return Err(Error::shape("patchify", shape, &[s, s])),
    };
    let p = cfg.patch_side;
    let g = s / p;
    let mut out = Vec::with_capacity(images.len());
    for img in images.data().chunks(s * s) {
        for gy in 0..g {
            for gx in 0..g {
                for y in 0..p {
                    let row = (gy * p + y) * s + gx * p;
                    out.extend_from_slice(&img[row..row + p]);
                }
            }
        }
    }
    Tensor::new(vec![batch, g * g, p * p], out)
}

/// Patch embedding `I`: projected patches plus positional embeddings, `[B, N, d]`.
pub fn patchify<'t>(
    tape: &'t Tape,
    images: &Tensor,
    enc: &EncoderParams<Var<'t>>,
    cfg: &ModelConfig,
) -> Result<Var<'t>> {
    let patches = tape.constant(extract_patches(images, cfg)?);
    patches
        .matmul(&enc.patch_weight)?
        .add(&enc.patch_bias)?
        .add(&enc.pos_embed)
}

fn affine_norm<'t>(x: &Var<'t>, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>> {
    x.layer_norm(eps)?.mul(gamma)?.add(beta)
}

fn attention<'t>(h: &Var<'t>, block: &BlockParams<Var<'t>>, cfg: &ModelConfig) -> Result<Var<'t>> {
    let shape = h.shape();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let (heads, dh) = (cfg.heads, cfg.head_dim());
    let split = |x: Var<'t>| -> Result<Var<'t>> {
        x.reshape(vec![b, t, heads, dh])?.permute(&[0, 2, 1, 3])
    };
    let q = split(h.matmul(&block.wq)?.add(&block.bq)?)?;
    let k = split(h.matmul(&block.wk)?.add(&block.bk)?)?;
    let v = split(h.matmul(&block.wv)?.add(&block.bv)?)?;
    let scores = q.matmul(&k.transpose()?)?.scale(1.0 / (dh as f64).sqrt());
    let ctx = scores.softmax()?.matmul(&v)?;
    let merged = ctx.permute(&[0, 2, 1, 3])?.reshape(vec![b, t, d])?;
    merged.matmul(&block.wo)?.add(&block.bo)
}

/// One self-attention block:
/// `x_o = MHSA(LN(x)) + x`, `y_o = MLP(LN(x_o)) + x_o`, and with an adapter
/// the output is `y_o + Adapter(x_o)`.
///
/// Accepts `[T, d]` or `[B, T, d]` for any token count `T`.
pub fn sab_forward<'t>(
    x: &Var<'t>,
    block: &BlockParams<Var<'t>>,
    adapter: Option<&AdapterLayer<Var<'t>>>,
    cfg: &ModelConfig,
) -> Result<Var<'t>> {
    let shape = x.shape();
    let batched = match shape.len() {
        3 => *x,
        2 => x.reshape(vec![1, shape[0], shape[1]])?,
        _ => return Err(Error::shape("sab_forward", &shape, &[cfg.dim])),
    };
    if *shape.last().unwrap() != cfg.dim {
        return Err(Error::shape("sab_forward", &shape, &[cfg.dim]));
    }
    let eps = cfg.ln_eps;
    let h = affine_norm(&batched, &block.ln1_gamma, &block.ln1_beta, eps)?;
    let x_o = attention(&h, block, cfg)?.add(&batched)?;
    let h2 = affine_norm(&x_o, &block.ln2_gamma, &block.ln2_beta, eps)?;
    let mlp = h2
        .matmul(&block.w1)?
        .add(&block.b1)?
        .gelu()
        .matmul(&block.w2)?
        .add(&block.b2)?;
    let mut y = mlp.add(&x_o)?;
    if let Some(a) = adapter {
        y = y.add(&adapter_forward(&x_o, a)?)?;
    }
    if shape.len() == 2 {
        y = y.reshape(shape)?;
    }
    Ok(y)
}

/// Output of [`encoder_forward`]: prompt tokens `o_P` `[B, n, d]` and image
/// tokens `o_I` `[B, N, d]`.
pub struct EncoderOutput<'t> {
    pub prompts: Var<'t>,
    pub image: Var<'t>,
}

/// Runs the full encoder on `[B, H, W]` images. `prompts` is `[n, d]`
/// (shared by every image in the batch) or `None` for `n = 0`.
pub fn encoder_forward<'t>(
    tape: &'t Tape,
    images: &Tensor,
    prompts: Option<&Var<'t>>,
    enc: &EncoderParams<Var<'t>>,
    adapters: Option<&AdapterParams<Var<'t>>>,
    cfg: &ModelConfig,
) -> Result<EncoderOutput<'t>> {
    let mut x = patchify(tape, images, enc, cfg)?;
    let batch = x.shape()[0];
    let n = match prompts {
        Some(p) => {
            let s = p.shape();
            if s.len() != 2 || s[1] != cfg.dim {
                return Err(Error::shape("encoder_forward prompts", &s, &[cfg.dim]));
            }
            s[0]
        }
        None => 0,
    };
    for (i, block) in enc.blocks.iter().enumerate() {
        let layer = i + 1;
        let adapter = adapters.and_then(|a| a.layer(layer));
        x = sab_forward(&x, block, adapter, cfg)?;
        if layer == cfg.prompt_layer {
            if let Some(p) = prompts.filter(|_| n > 0) {
                x = Var::concat(&[p.expand_leading(batch), x])?;
            }
        }
    }
    let x = affine_norm(&x, &enc.final_gamma, &enc.final_beta, cfg.ln_eps)?;
    let total = x.shape()[1];
    Ok(EncoderOutput {
        prompts: x.slice_tokens(0, n)?,
        image: x.slice_tokens(n, total)?,
    })
}
