//! Stage-by-stage training and evaluation over a Bx-Cy task stream.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{FreezePolicy, TrainableMask};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::loss::{asl_loss, mask_to_task, AslConfig};
use crate::metrics::{cf1_of1, forgetting, mean_ap, per_class_ap, AccuracyMatrix, SessionMetrics};
use crate::model::Model;
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::p2l::{freeze_previous, orthogonality_penalty, PromptInit, SemanticInit};
use crate::report::{FreezeRecord, Report, SessionRow, Timing};
use crate::stream::{build_task_stream, Task, TaskStream};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::vit::{EncoderParams, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Random class prompts, adapters trained in stage 1.
    P2lCa,
    /// As `P2lCa` with prompts initialized from class embeddings.
    P2lCaPlus,
    /// Prompts and heads on an adapter-free backbone, everything trainable.
    FineTuning,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::P2lCa => "p2l_ca",
            Method::P2lCaPlus => "p2l_ca_plus",
            Method::FineTuning => "fine_tuning",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p2l_ca" => Ok(Method::P2lCa),
            "p2l_ca_plus" => Ok(Method::P2lCaPlus),
            "fine_tuning" => Ok(Method::FineTuning),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected p2l_ca, p2l_ca_plus or fine_tuning)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub no_adapters: bool,
    pub ca_unfrozen: bool,
    pub prompts_unfrozen: bool,
    pub heads_unfrozen: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub cosine: bool,
    pub adam: AdamConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            epochs: 20,
            batch_size: 64,
            cosine: true,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub base: usize,
    pub increment: usize,
    pub model: ModelConfig,
    pub asl: AslConfig,
    pub optim: OptimConfig,
    pub method: Method,
    pub ablation: Ablation,
    /// Weight of the prompt orthogonality penalty; 0 disables it.
    pub ortho_weight: f64,
    /// Probability threshold for CF1/OF1.
    pub tau: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            base: 4,
            increment: 4,
            model: ModelConfig::default(),
            asl: AslConfig::default(),
            optim: OptimConfig::default(),
            method: Method::P2lCa,
            ablation: Ablation::default(),
            ortho_weight: 0.0,
            tau: 0.5,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.asl.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0) || o.epochs == 0 || o.batch_size == 0 {
            return Err(Error::Config("lr, epochs and batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config("tau must lie in [0, 1]".into()));
        }
        if !(self.ortho_weight >= 0.0) {
            return Err(Error::Config("ortho_weight must be >= 0".into()));
        }
        Ok(())
    }

    pub fn uses_adapters(&self) -> bool {
        self.method != Method::FineTuning && !self.ablation.no_adapters
    }

    pub fn policy(&self) -> FreezePolicy {
        match self.method {
            Method::FineTuning => FreezePolicy::fine_tuning(),
            _ => FreezePolicy {
                backbone_trainable: false,
                ca_unfrozen: self.ablation.ca_unfrozen,
                prompts_unfrozen: self.ablation.prompts_unfrozen,
                heads_unfrozen: self.ablation.heads_unfrozen,
            },
        }
    }
}

/// Stacks the images of `indices` into `[B, H, W]`.
pub fn batch_images(samples: &[Sample], indices: &[usize], side: usize) -> Tensor {
    let mut data = Vec::with_capacity(indices.len() * side * side);
    for &i in indices {
        data.extend_from_slice(&samples[i].image);
    }
    Tensor::new(vec![indices.len(), side, side], data).expect("image size checked on load")
}

fn check_images(ds: &Dataset, cfg: &ModelConfig) -> Result<()> {
    if ds.image_side != cfg.image_side {
        return Err(Error::Config(format!(
            "dataset images are {0}x{0}, model expects {1}x{1}",
            ds.image_side, cfg.image_side
        )));
    }
    Ok(())
}

fn stage_rng(seed: u64, stage: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (stage as u64).wrapping_mul(0x2545_f491_4f6c_dd1d))
}

/// Trains the parameters `mask` marks trainable on the task's images, with
/// ASL over the task's classes only. Returns the mean loss of each epoch.
pub fn train_stage(
    model: &mut Model,
    ds: &Dataset,
    task: &Task,
    mask: &TrainableMask,
    cfg: &RunConfig,
) -> Result<Vec<f64>> {
    if task.train.is_empty() {
        return Err(Error::Protocol(format!("task {} has no training images", task.stage)));
    }
    let class_ids = model.pool.class_ids();
    let columns = task
        .classes
        .iter()
        .map(|c| {
            class_ids
                .binary_search(c)
                .map_err(|_| Error::Protocol(format!("class {c} has no prompt")))
        })
        .collect::<Result<Vec<_>>>()?;
    let o = &cfg.optim;
    let batches = task.train.len().div_ceil(o.batch_size);
    let total = batches * o.epochs;
    let mut adam = Adam::new(o.adam);
    let mut rng = stage_rng(cfg.seed, task.stage);
    let mut order = task.train.clone();
    let mut losses = Vec::with_capacity(o.epochs);
    let mut step = 0;
    for _ in 0..o.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(o.batch_size) {
            let images = batch_images(&ds.train, chunk, ds.image_side);
            let mut targets = Vec::with_capacity(chunk.len() * task.classes.len());
            for &i in chunk {
                targets.extend(mask_to_task(&ds.train[i].labels, &task.classes));
            }
            let targets = Tensor::new(vec![chunk.len(), task.classes.len()], targets)?;
            let tape = Tape::new();
            let bound = model.bind(&tape, Some(mask));
            let logits = bound.forward(&tape, &images, &model.config)?;
            let mut loss = asl_loss(&logits.gather_last(&columns)?, &targets, &cfg.asl)?;
            if cfg.ortho_weight > 0.0 && class_ids.len() > 1 {
                let prompts = bound.prompts.as_ref().expect("model has classes");
                loss = loss.add(&orthogonality_penalty(prompts)?.scale(cfg.ortho_weight))?;
            }
            epoch_loss += loss.item() * chunk.len() as f64;
            tape.backward(loss)?;
            let lr = if o.cosine { cosine_lr(o.lr, step, total) } else { o.lr };
            adam.step(model, &bound.grads(), lr)?;
            step += 1;
        }
        losses.push(epoch_loss / order.len() as f64);
    }
    Ok(losses)
}

/// Probabilities `[S, n]` over the model's classes for the given test
/// images, computed in fixed-size chunks.
pub fn predict_indices(model: &Model, samples: &[Sample], indices: &[usize], side: usize) -> Result<Tensor> {
    let n = model.pool.len();
    let mut data = Vec::with_capacity(indices.len() * n);
    for chunk in indices.chunks(64) {
        data.extend(model.predict(&batch_images(samples, chunk, side))?.into_data());
    }
    Tensor::new(vec![indices.len(), n], data)
}

/// Scores every test image containing a learned class over all learned
/// classes.
pub fn evaluate_session(
    model: &Model,
    ds: &Dataset,
    stream: &TaskStream,
    stage: usize,
    tau: f64,
) -> Result<SessionMetrics> {
    let learned = stream.learned_classes(stage);
    if model.pool.class_ids() != learned {
        return Err(Error::Protocol("model classes differ from the learned classes".into()));
    }
    let idx = stream.eval_indices(ds, stage);
    let probs = predict_indices(model, &ds.test, &idx, ds.image_side)?;
    let mut labels = Vec::with_capacity(idx.len() * learned.len());
    for &i in &idx {
        labels.extend(mask_to_task(&ds.test[i].labels, &learned));
    }
    let labels = Tensor::new(vec![idx.len(), learned.len()], labels)?;
    let aps = per_class_ap(&probs, &labels)?;
    let map = mean_ap(&aps)?;
    let (cf1, of1) = cf1_of1(&probs, &labels, tau)?;
    let mut offset = 0;
    let task_maps = stream.tasks[..stage]
        .iter()
        .map(|t| {
            let slice = &aps[offset..offset + t.classes.len()];
            offset += t.classes.len();
            mean_ap(slice).unwrap_or(0.0)
        })
        .collect();
    Ok(SessionMetrics {
        session: stage,
        per_class_ap: learned.iter().copied().zip(aps.iter().copied()).collect(),
        map,
        cf1,
        of1,
        task_maps,
        samples: idx.len(),
        skipped_classes: learned
            .iter()
            .zip(&aps)
            .filter(|(_, a)| a.is_none())
            .map(|(&c, _)| c)
            .collect(),
    })
}

pub struct RunOutput {
    pub report: Report,
    pub timing: Timing,
    pub model: Model,
}

/// Name filter for the parameters a continual stage must leave untouched:
/// backbone, adapters, and the prompts and heads of earlier tasks.
fn frozen_selector(earlier: &[usize]) -> impl Fn(&str) -> bool + '_ {
    move |name: &str| {
        if name.starts_with("encoder.") || name.starts_with("adapter.") {
            return true;
        }
        let class = name
            .strip_prefix("prompt.")
            .or_else(|| name.strip_prefix("head."))
            .and_then(|rest| rest.split('.').next())
            .and_then(|c| c.parse::<usize>().ok());
        class.is_some_and(|c| earlier.binary_search(&c).is_ok())
    }
}

/// Runs every stage: add prompts, freeze earlier ones, train, evaluate.
///
/// `backbone` is a pretrained encoder (kept frozen unless the method is
/// fine-tuning); `None` starts from a random encoder, which stays frozen
/// as well. `embeddings` is required for [`Method::P2lCaPlus`].
pub fn run_benchmark(
    cfg: &RunConfig,
    ds: &Dataset,
    backbone: Option<EncoderParams>,
    embeddings: Option<&SemanticInit>,
) -> Result<RunOutput> {
    cfg.validate()?;
    check_images(ds, &cfg.model)?;
    let start = Instant::now();
    let stream = build_task_stream(ds, cfg.base, cfg.increment)?;
    let init = match (cfg.method, embeddings) {
        (Method::P2lCaPlus, Some(e)) => {
            if let Some(c) = (0..ds.n_classes()).find(|&c| e.get(c).is_none()) {
                return Err(Error::Config(format!("no embedding for class {c}")));
            }
            PromptInit::Semantic { seed: cfg.seed, init: e }
        }
        (Method::P2lCaPlus, None) => {
            return Err(Error::Config("p2l_ca_plus needs class embeddings".into()));
        }
        _ => PromptInit::Random { seed: cfg.seed },
    };
    let backbone_hash = backbone.as_ref().map(|b| {
        let mut h = Model::new(cfg.model.clone(), Some(b.clone()), false).ok();
        h.as_mut().map(|m| m.hash_params(|_| true)).unwrap_or_default()
    });
    let mut model = Model::new(cfg.model.clone(), backbone, cfg.uses_adapters())?;
    model.encoder.frozen = true;
    let policy = cfg.policy();

    let mut matrix = AccuracyMatrix::new();
    let mut sessions = Vec::new();
    let mut trainable = Vec::new();
    let mut parity = Vec::new();
    let mut stage_seconds = Vec::new();
    let mut last = None;
    for task in &stream.tasks {
        let t0 = Instant::now();
        let stage = task.stage;
        model.add_classes(&task.classes, stage, &init)?;
        freeze_previous(&mut model.pool, &mut model.bank, stage);
        if stage > 1 {
            if let Some(a) = &mut model.adapters {
                a.frozen = true;
            }
        }
        let mask = model.trainable_mask(stage, policy);
        let earlier = stream.learned_classes(stage - 1);
        let before = model.hash_params(frozen_selector(&earlier));
        train_stage(&mut model, ds, task, &mask, cfg)?;
        if stage > 1 {
            parity.push(FreezeRecord {
                stage,
                before,
                after: model.hash_params(frozen_selector(&earlier)),
            });
        }
        let m = evaluate_session(&model, ds, &stream, stage, cfg.tau)?;
        matrix.push_row(m.task_maps.clone())?;
        trainable.push(mask.trainable_scalars());
        sessions.push(SessionRow {
            session: stage,
            classes: m.per_class_ap.len(),
            samples: m.samples,
            map: m.map,
            cf1: m.cf1,
            of1: m.of1,
            task_maps: m.task_maps.clone(),
            trainable_params: mask.trainable_scalars(),
            skipped_classes: m.skipped_classes.clone(),
        });
        stage_seconds.push(t0.elapsed().as_secs_f64());
        last = Some(m);
    }
    let last = last.expect("stream has at least one task");
    let report = Report {
        config: cfg.clone(),
        dataset_spec_hash: ds.spec_hash.clone(),
        dataset_content_hash: ds.content_hash(),
        backbone_hash,
        model_hash: model.hash_params(|_| true),
        map_rule: "classes without a positive test image in a session are skipped".into(),
        last_map: last.map,
        avg_map: sessions.iter().map(|s| s.map).sum::<f64>() / sessions.len() as f64,
        final_cf1: last.cf1,
        final_of1: last.of1,
        forgetting: forgetting(&matrix),
        final_class_ap: last.per_class_ap,
        sessions,
        accuracy_matrix: matrix,
        trainable_params: trainable,
        freeze_parity: parity,
    };
    let timing = Timing {
        pretrain_seconds: None,
        stage_seconds,
        total_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutput { report, timing, model })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Trains a fresh encoder together with temporary per-class query tokens
/// and heads on every class of `ds` (plain BCE), then marks the encoder
/// frozen. The tokens and heads are dropped.
pub fn simulate_pretraining(
    model_cfg: &ModelConfig,
    ds: &Dataset,
    pcfg: &PretrainConfig,
) -> Result<EncoderParams> {
    model_cfg.validate()?;
    check_images(ds, model_cfg)?;
    if ds.train.is_empty() || pcfg.epochs == 0 || pcfg.batch_size == 0 {
        return Err(Error::Config("pretraining needs data, epochs and a batch size".into()));
    }
    let mut holder = Model::new(model_cfg.clone(), None, false)?;
    let all: Vec<usize> = (0..ds.n_classes()).collect();
    holder.add_classes(&all, 1, &PromptInit::Random { seed: pcfg.seed ^ 0x9e7a_1a1e })?;
    let everything = holder.trainable_mask(1, FreezePolicy::fine_tuning());
    let bce = AslConfig::bce();
    let mut adam = Adam::new(AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(pcfg.seed);
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    let total = order.len().div_ceil(pcfg.batch_size) * pcfg.epochs;
    let mut step = 0;
    for _ in 0..pcfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(pcfg.batch_size) {
            let images = batch_images(&ds.train, chunk, ds.image_side);
            let mut targets = Vec::with_capacity(chunk.len() * all.len());
            for &i in chunk {
                targets.extend(mask_to_task(&ds.train[i].labels, &all));
            }
            let targets = Tensor::new(vec![chunk.len(), all.len()], targets)?;
            let tape = Tape::new();
            let bound = holder.bind(&tape, Some(&everything));
            let logits = bound.forward(&tape, &images, model_cfg)?;
            tape.backward(asl_loss(&logits, &targets, &bce)?)?;
            adam.step(&mut holder, &bound.grads(), cosine_lr(pcfg.lr, step, total))?;
            step += 1;
        }
    }
    let mut encoder = holder.encoder;
    encoder.frozen = true;
    Ok(encoder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticSpec};

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            base: 2,
            increment: 2,
            model: ModelConfig {
                dim: 16,
                layers: 2,
                heads: 2,
                prompt_layer: 1,
                adapter_start: 2,
                bottleneck: 4,
                ..ModelConfig::default()
            },
            optim: OptimConfig {
                lr: 1e-2,
                epochs: 2,
                batch_size: 16,
                ..OptimConfig::default()
            },
            ..RunConfig::default()
        }
    }

    fn tiny_data() -> Dataset {
        let spec = SyntheticSpec {
            n_classes: 4,
            n_train: 60,
            n_test: 40,
            max_labels: 2,
            min_positive: 3,
            ..SyntheticSpec::default()
        };
        generate_dataset(&spec, 3).unwrap()
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::P2lCa, Method::P2lCaPlus, Method::FineTuning] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("l2p".parse::<Method>().is_err());
    }

    #[test]
    fn small_run_reports_every_stage() {
        let out = run_benchmark(&tiny_cfg(), &tiny_data(), None, None).unwrap();
        let r = &out.report;
        assert_eq!(r.sessions.len(), 2);
        assert_eq!(r.accuracy_matrix.stages(), 2);
        assert!(r.freeze_parity.iter().all(FreezeRecord::holds));
        assert_eq!(r.trainable_params[1], 2 * (2 * 16 + 1));
        assert!((r.avg_map - (r.sessions[0].map + r.sessions[1].map) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn single_stage_has_no_forgetting() {
        let cfg = RunConfig {
            base: 4,
            ..tiny_cfg()
        };
        let r = run_benchmark(&cfg, &tiny_data(), None, None).unwrap().report;
        assert_eq!(r.sessions.len(), 1);
        assert_eq!(r.avg_map, r.last_map);
        assert_eq!(r.forgetting, 0.0);
    }

    #[test]
    fn plus_requires_embeddings() {
        let cfg = RunConfig {
            method: Method::P2lCaPlus,
            ..tiny_cfg()
        };
        assert!(matches!(run_benchmark(&cfg, &tiny_data(), None, None), Err(Error::Config(_))));
    }

    #[test]
    fn pretraining_freezes_the_encoder() {
        let cfg = tiny_cfg().model;
        let p = PretrainConfig {
            epochs: 1,
            ..PretrainConfig::default()
        };
        let ds = tiny_data();
        let a = simulate_pretraining(&cfg, &ds, &p).unwrap();
        assert!(a.frozen);
        assert_eq!(a, simulate_pretraining(&cfg, &ds, &p).unwrap());
        assert_ne!(a.patch_weight, EncoderParams::init(&cfg).unwrap().patch_weight);
    }
}
