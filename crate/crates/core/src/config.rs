//! Flat key/value run configuration (TOML syntax).
//!
//! Every key is optional; missing keys take the defaults printed by
//! [`ConfigFile::default_text`]. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, Dataset, DomainShift, SyntheticSpec};
use crate::error::{Error, Result};
use crate::harness::{Ablation, Method, OptimConfig, PretrainConfig, RunConfig};
use crate::loss::AslConfig;
use crate::optim::AdamConfig;
use crate::vit::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    // protocol
    pub base: usize,
    pub increment: usize,
    pub method: String,
    pub seed: u64,
    // model
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub image_side: usize,
    pub patch_side: usize,
    pub mlp_ratio: usize,
    pub prompt_layer: usize,
    pub adapter_start: usize,
    pub bottleneck: usize,
    pub ln_eps: f64,
    pub model_seed: u64,
    // loss
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub clip: f64,
    // optimizer
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub cosine: bool,
    // ablations
    pub no_adapters: bool,
    pub ca_unfrozen: bool,
    pub prompts_unfrozen: bool,
    pub heads_unfrozen: bool,
    pub ortho_weight: f64,
    pub tau: f64,
    // pretraining
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,
    // synthetic data
    pub n_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub cell_side: usize,
    pub min_labels: usize,
    pub max_labels: usize,
    pub stamp_seed: u64,
    pub stamp_amplitude: f64,
    pub noise_sigma: f64,
    pub min_positive: usize,
    pub data_seed: u64,
    pub pretrain_data_seed: u64,
    pub shift_contrast: f64,
    pub shift_offset: f64,
    /// 0 keeps pixel positions.
    pub shift_permutation_seed: u64,
}

impl Default for ConfigFile {
    fn default() -> Self {
        let run = RunConfig::default();
        let m = &run.model;
        let spec = SyntheticSpec::default();
        let pre = PretrainConfig::default();
        Self {
            base: run.base,
            increment: run.increment,
            method: run.method.to_string(),
            seed: run.seed,
            dim: m.dim,
            layers: m.layers,
            heads: m.heads,
            image_side: m.image_side,
            patch_side: m.patch_side,
            mlp_ratio: m.mlp_ratio,
            prompt_layer: m.prompt_layer,
            adapter_start: m.adapter_start,
            bottleneck: m.bottleneck,
            ln_eps: m.ln_eps,
            model_seed: m.seed,
            gamma_pos: run.asl.gamma_pos,
            gamma_neg: run.asl.gamma_neg,
            clip: run.asl.clip,
            lr: run.optim.lr,
            epochs: run.optim.epochs,
            batch_size: run.optim.batch_size,
            cosine: run.optim.cosine,
            no_adapters: false,
            ca_unfrozen: false,
            prompts_unfrozen: false,
            heads_unfrozen: false,
            ortho_weight: run.ortho_weight,
            tau: run.tau,
            pretrain_epochs: pre.epochs,
            pretrain_lr: pre.lr,
            pretrain_batch_size: pre.batch_size,
            n_classes: spec.n_classes,
            n_train: spec.n_train,
            n_test: spec.n_test,
            cell_side: spec.cell_side,
            min_labels: spec.min_labels,
            max_labels: spec.max_labels,
            stamp_seed: spec.stamp_seed,
            stamp_amplitude: spec.stamp_amplitude,
            noise_sigma: spec.noise_sigma,
            min_positive: spec.min_positive,
            data_seed: 1,
            pretrain_data_seed: 101,
            shift_contrast: 1.0,
            shift_offset: 0.0,
            shift_permutation_seed: 0,
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ConfigFile {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: source.to_string(),
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            msg: e.message().to_string(),
        })?;
        cfg.method.parse::<Method>().map_err(|e| Error::Parse {
            path: source.to_string(),
            line: text
                .lines()
                .position(|l| l.trim_start().starts_with("method"))
                .map_or(0, |i| i + 1),
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn default_text() -> String {
        Self::default().to_text()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            image_side: self.image_side,
            patch_side: self.patch_side,
            mlp_ratio: self.mlp_ratio,
            prompt_layer: self.prompt_layer,
            adapter_start: self.adapter_start,
            bottleneck: self.bottleneck,
            ln_eps: self.ln_eps,
            seed: self.model_seed,
        }
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let cfg = RunConfig {
            base: self.base,
            increment: self.increment,
            model: self.model(),
            asl: AslConfig {
                gamma_pos: self.gamma_pos,
                gamma_neg: self.gamma_neg,
                clip: self.clip,
            },
            optim: OptimConfig {
                lr: self.lr,
                epochs: self.epochs,
                batch_size: self.batch_size,
                cosine: self.cosine,
                adam: AdamConfig::default(),
            },
            method: self.method.parse()?,
            ablation: Ablation {
                no_adapters: self.no_adapters,
                ca_unfrozen: self.ca_unfrozen,
                prompts_unfrozen: self.prompts_unfrozen,
                heads_unfrozen: self.heads_unfrozen,
            },
            ortho_weight: self.ortho_weight,
            tau: self.tau,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            batch_size: self.pretrain_batch_size,
            seed: self.seed,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_classes: self.n_classes,
            image_side: self.image_side,
            cell_side: self.cell_side,
            n_train: self.n_train,
            n_test: self.n_test,
            min_labels: self.min_labels,
            max_labels: self.max_labels,
            stamp_seed: self.stamp_seed,
            stamp_amplitude: self.stamp_amplitude,
            noise_sigma: self.noise_sigma,
            min_positive: self.min_positive,
            ..SyntheticSpec::default()
        }
    }

    pub fn shift(&self) -> DomainShift {
        DomainShift {
            contrast: self.shift_contrast,
            offset: self.shift_offset,
            cell_side: self.cell_side,
            permutation_seed: (self.shift_permutation_seed != 0).then_some(self.shift_permutation_seed),
        }
    }

    /// Benchmark-domain data: generated with `data_seed`, then shifted.
    pub fn benchmark_dataset(&self) -> Result<Dataset> {
        let ds = generate_dataset(&self.synthetic_spec(), self.data_seed)?;
        let mut shifted = self.shift().apply(&ds)?;
        shifted.spec_hash = ds.spec_hash_with_shift(&self.shift());
        Ok(shifted)
    }

    /// Pretraining-domain data: same generator, `pretrain_data_seed`, no
    /// shift.
    pub fn pretrain_dataset(&self) -> Result<Dataset> {
        generate_dataset(&self.synthetic_spec(), self.pretrain_data_seed)
    }
}
