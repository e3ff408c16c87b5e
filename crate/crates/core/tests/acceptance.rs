//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs under `cargo test --workspace` (harness = false).

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use p2lca_core::adapter::{adapter_forward, attach_adapters, AdapterLayer, FreezePolicy};
use p2lca_core::config::ConfigFile;
use p2lca_core::data::{Dataset, Sample};
use p2lca_core::gradcheck::{finite_difference_gradient, max_relative_error};
use p2lca_core::harness::{run_benchmark, simulate_pretraining, train_stage, Method, RunConfig};
use p2lca_core::loss::{asl_loss, AslConfig};
use p2lca_core::metrics::{average_precision, cf1_of1, forgetting, AccuracyMatrix};
use p2lca_core::model::Model;
use p2lca_core::p2l::{freeze_previous, PromptInit};
use p2lca_core::report::Report;
use p2lca_core::stream::{build_task_stream, task_splits};
use p2lca_core::vit::{encoder_forward, EncoderParams, ModelConfig};
use p2lca_core::{Tape, Tensor};

const DESK_CONFIG: &str = include_str!("../../../configs/desk.toml");

const GRAD_EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
const GRAD_FLOOR: f64 = 1e-6;
const GRAD_SEEDS: u64 = 20;

// Pinned from the seeded desk run (seed 1, configs/desk.toml).
const PINNED_CA_LAST: f64 = 0.841_2;
const PINNED_CA_FORGETTING: f64 = 0.090_1;
const PINNED_CA_STAGE1: f64 = 0.997_4;
const PINNED_FT_LAST: f64 = 0.259_9;
const PINNED_FT_FORGETTING: f64 = 0.419_4;
const PINNED_NOAD_STAGE1: f64 = 0.898_2;
const PINNED_PU_LAST: f64 = 0.694_6;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- gradients

fn grad_cfg(seed: u64) -> ModelConfig {
    ModelConfig {
        dim: 8,
        layers: 3,
        heads: 2,
        image_side: 8,
        patch_side: 4,
        mlp_ratio: 2,
        prompt_layer: 1,
        adapter_start: 2,
        bottleneck: 3,
        seed,
        ..ModelConfig::default()
    }
}

fn named(model: &Model, name: &str) -> Tensor {
    let mut out = None;
    model.visit_params(&mut |n, s, d| {
        if n == name {
            out = Some(Tensor::new(s.to_vec(), d.to_vec()).unwrap());
        }
    });
    out.expect("parameter exists")
}

fn model_loss(model: &Model, images: &Tensor, targets: &Tensor, asl: &AslConfig) -> f64 {
    let tape = Tape::new();
    let bound = model.bind(&tape, None);
    let logits = bound.forward(&tape, images, &model.config).unwrap();
    asl_loss(&logits, targets, asl).unwrap().item()
}

/// Checks every gradient `bound.grads()` reports for `model` under `mask`
/// against central differences. Returns the worst relative error.
fn check_model_grads(
    model: &Model,
    policy: FreezePolicy,
    stage: usize,
    images: &Tensor,
    targets: &Tensor,
    asl: &AslConfig,
    filter: impl Fn(&str) -> bool,
) -> Result<(f64, usize), String> {
    let mask = model.trainable_mask(stage, policy);
    let tape = Tape::new();
    let bound = model.bind(&tape, Some(&mask));
    let logits = bound.forward(&tape, images, &model.config).map_err(err)?;
    let loss = asl_loss(&logits, targets, asl).map_err(err)?;
    tape.backward(loss).map_err(err)?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, g) in bound.grads().into_iter().filter(|(n, _)| filter(n)) {
        let theta = named(model, &name);
        let num = finite_difference_gradient(
            |th| {
                let mut m = model.clone();
                m.visit_params_mut(&mut |n, d| {
                    if n == name {
                        d.copy_from_slice(th.data());
                    }
                });
                Ok(model_loss(&m, images, targets, asl))
            },
            &theta,
            GRAD_EPS,
        )
        .map_err(err)?;
        let e = max_relative_error(&g, &num, GRAD_FLOOR);
        if e > GRAD_TOL {
            return Err(format!("{name}: relative error {e:.2e}"));
        }
        worst = worst.max(e);
        checked += 1;
    }
    Ok((worst, checked))
}

fn random_targets(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| f64::from(rng.random_range(0..2u8))).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn perturbed_model(seed: u64, rng: &mut ChaCha8Rng) -> Model {
    let cfg = grad_cfg(seed);
    let mut model = Model::new(cfg, None, true).unwrap();
    model.add_classes(&[0, 1], 1, &PromptInit::Random { seed }).unwrap();
    model.add_classes(&[2, 3], 2, &PromptInit::Random { seed }).unwrap();
    // Move adapters, prompts and heads away from their (partly zero) init so
    // every path carries gradient.
    model.visit_params_mut(&mut |n, d| {
        if n.starts_with("adapter.") || n.starts_with("prompt.") || n.starts_with("head.") {
            for v in d.iter_mut() {
                *v = rng.random_range(-0.6..0.6);
            }
        }
    });
    model
}

fn criterion_gradients() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut arrays = 0;
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);

        // ASL on raw logits for each focusing exponent.
        for gamma in [0.0, 1.0, 4.0] {
            let asl = AslConfig {
                gamma_pos: gamma,
                gamma_neg: gamma,
                ..AslConfig::default()
            };
            let z = Tensor::uniform(vec![4, 5], -3.0, 3.0, &mut rng);
            let y = random_targets(4, 5, &mut rng);
            let tape = Tape::new();
            let zv = tape.param(z.clone());
            tape.backward(asl_loss(&zv, &y, &asl).map_err(err)?).map_err(err)?;
            let num = finite_difference_gradient(
                |th| {
                    let t = Tape::new();
                    Ok(asl_loss(&t.constant(th.clone()), &y, &asl)?.item())
                },
                &z,
                GRAD_EPS,
            )
            .map_err(err)?;
            let e = max_relative_error(&zv.grad().unwrap(), &num, GRAD_FLOOR);
            ensure(e <= GRAD_TOL, format!("seed {seed} ASL gamma {gamma}: {e:.2e}"))?;
            worst = worst.max(e);
            arrays += 1;
        }

        // Adapter parameters in isolation.
        let (d, b) = (6, 3);
        let layer = AdapterLayer {
            down_weight: Tensor::randn(vec![d, b], 0.7, &mut rng),
            down_bias: Tensor::randn(vec![b], 0.3, &mut rng),
            up_weight: Tensor::randn(vec![b, d], 0.7, &mut rng),
            up_bias: Tensor::randn(vec![d], 0.3, &mut rng),
        };
        let x = Tensor::randn(vec![2, 5, d], 1.0, &mut rng);
        let w = Tensor::randn(vec![2, 5, d], 1.0, &mut rng);
        let adapter_loss = |l: &AdapterLayer| -> f64 {
            let t = Tape::new();
            let vars = l.map("a", &mut |_, p| t.constant(p.clone()));
            let out = adapter_forward(&t.constant(x.clone()), &vars).unwrap();
            out.mul(&t.constant(w.clone())).unwrap().sum().item()
        };
        let tape = Tape::new();
        let vars = layer.map("a", &mut |_, p| tape.param(p.clone()));
        let out = adapter_forward(&tape.constant(x.clone()), &vars).map_err(err)?;
        tape.backward(out.mul(&tape.constant(w.clone())).map_err(err)?.sum()).map_err(err)?;
        let mut analytic = Vec::new();
        vars.visit("a", &mut |n, v| analytic.push((n.to_string(), v.grad().unwrap())));
        for (name, g) in analytic {
            let field = name.trim_start_matches("a.").to_string();
            let theta = {
                let mut t = None;
                layer.visit("a", &mut |n, p| {
                    if n == name {
                        t = Some(p.clone());
                    }
                });
                t.unwrap()
            };
            let num = finite_difference_gradient(
                |th| {
                    let mut l = layer.clone();
                    l.visit_mut("a", &mut |n, p| {
                        if n == name {
                            *p = th.clone();
                        }
                    });
                    Ok(adapter_loss(&l))
                },
                &theta,
                GRAD_EPS,
            )
            .map_err(err)?;
            let e = max_relative_error(&g, &num, GRAD_FLOOR);
            ensure(e <= GRAD_TOL, format!("seed {seed} adapter {field}: {e:.2e}"))?;
            worst = worst.max(e);
            arrays += 1;
        }

        // Prompts and heads of the current stage through a frozen backbone
        // with frozen (non-zero) adapters.
        let mut model = perturbed_model(seed, &mut rng);
        freeze_previous(&mut model.pool, &mut model.bank, 2);
        model.adapters.as_mut().unwrap().frozen = true;
        let images = Tensor::randn(vec![3, 8, 8], 1.0, &mut rng);
        let targets = random_targets(3, 4, &mut rng);
        let (e, n) = check_model_grads(
            &model,
            FreezePolicy::default(),
            2,
            &images,
            &targets,
            &AslConfig::default(),
            |_| true,
        )
        .map_err(|m| format!("seed {seed} continual stage: {m}"))?;
        ensure(n == 6, format!("seed {seed}: expected 6 trainable arrays, got {n}"))?;
        worst = worst.max(e);
        arrays += n;

        // Full loss with every parameter trainable, including the backbone.
        let model = perturbed_model(seed, &mut rng);
        let (e, n) = check_model_grads(
            &model,
            FreezePolicy::fine_tuning(),
            1,
            &images,
            &targets,
            &AslConfig::default(),
            |_| true,
        )
        .map_err(|m| format!("seed {seed} full model: {m}"))?;
        worst = worst.max(e);
        arrays += n;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("took {secs:.1}s (limit 60s)"))?;
    Ok(format!(
        "{arrays} arrays over {GRAD_SEEDS} seeds, worst rel err {worst:.2e} (eps {GRAD_EPS:e}, tol {GRAD_TOL:e}), {secs:.1}s"
    ))
}

// ------------------------------------------------------- zero-init adapters

fn criterion_zero_adapters() -> Check {
    let cfg = ModelConfig::default();
    let enc = EncoderParams::init(&cfg).map_err(err)?;
    let adapters = attach_adapters(&cfg).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let prompts = Tensor::randn(vec![5, cfg.dim], 0.5, &mut rng);
    let images = Tensor::randn(vec![100, cfg.image_side, cfg.image_side], 1.0, &mut rng);
    let tape = Tape::new();
    let ev = enc.map(&mut |_, t| tape.constant(t.clone()));
    let av = adapters.map(&mut |_, t| tape.constant(t.clone()));
    let p = tape.constant(prompts);
    let with = encoder_forward(&tape, &images, Some(&p), &ev, Some(&av), &cfg).map_err(err)?;
    let without = encoder_forward(&tape, &images, Some(&p), &ev, None, &cfg).map_err(err)?;
    let diff = with
        .prompts
        .value()
        .max_abs_diff(&without.prompts.value())
        .max(with.image.value().max_abs_diff(&without.image.value()));
    ensure(diff <= 1e-12, format!("max abs diff {diff:.3e}"))?;
    Ok(format!("100 images, {} adapters, max abs diff {diff:.1e}", adapters.layers.len()))
}

// -------------------------------------------------------------- freeze parity

fn hash_frozen(model: &Model, earlier: &BTreeSet<usize>) -> String {
    let mut h = Sha256::new();
    model.visit_params(&mut |name, _, data| {
        let class = name
            .split('.')
            .nth(1)
            .and_then(|c| c.parse::<usize>().ok());
        let keep = name.starts_with("encoder.")
            || name.starts_with("adapter.")
            || ((name.starts_with("prompt.") || name.starts_with("head."))
                && class.is_some_and(|c| earlier.contains(&c)));
        if keep {
            h.update(name.as_bytes());
            for v in data {
                h.update(v.to_le_bytes());
            }
        }
    });
    hex::encode(h.finalize())
}

fn criterion_freeze_parity(desk: &Desk) -> Check {
    // Independent stage loop with its own hashing, on the desk data.
    let mut cfg = desk.config.clone();
    cfg.optim.epochs = 2;
    let stream = build_task_stream(&desk.bench, cfg.base, cfg.increment).map_err(err)?;
    ensure(stream.len() == 3, "B4-C4 over 12 classes must give 3 tasks")?;
    let mut model = Model::new(cfg.model.clone(), Some(desk.backbone.clone()), true).map_err(err)?;
    let mut earlier = BTreeSet::new();
    let mut stages = 0;
    for task in &stream.tasks {
        model
            .add_classes(&task.classes, task.stage, &PromptInit::Random { seed: cfg.seed })
            .map_err(err)?;
        freeze_previous(&mut model.pool, &mut model.bank, task.stage);
        if task.stage > 1 {
            model.adapters.as_mut().unwrap().frozen = true;
        }
        let mask = model.trainable_mask(task.stage, cfg.policy());
        let before = hash_frozen(&model, &earlier);
        let adapters_before = model.hash_params(|n| n.starts_with("adapter."));
        train_stage(&mut model, &desk.bench, task, &mask, &cfg).map_err(err)?;
        let after = hash_frozen(&model, &earlier);
        if task.stage == 1 {
            ensure(
                adapters_before != model.hash_params(|n| n.starts_with("adapter.")),
                "adapters did not move in stage 1",
            )?;
        } else {
            ensure(before == after, format!("stage {} changed frozen parameters", task.stage))?;
            stages += 1;
        }
        earlier.extend(task.classes.iter().copied());
    }
    // The harness's own record for the full desk run must agree.
    ensure(
        desk.ca.freeze_parity.len() == 2 && desk.ca.freeze_parity.iter().all(|r| r.holds()),
        "desk run reports broken freeze parity",
    )?;
    Ok(format!("12-class B4-C4: frozen hash unchanged across stages 2..={}", stages + 1))
}

// ------------------------------------------------- permutation equivariance

fn criterion_permutation() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig {
            seed,
            ..ModelConfig::default()
        };
        let mut model = Model::new(cfg.clone(), None, true).map_err(err)?;
        let classes: Vec<usize> = (0..7).collect();
        model.add_classes(&classes, 1, &PromptInit::Random { seed }).map_err(err)?;
        model.visit_params_mut(&mut |n, d| {
            if !n.starts_with("encoder.") {
                for v in d.iter_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
            }
        });
        let images = Tensor::randn(vec![4, cfg.image_side, cfg.image_side], 1.0, &mut rng);
        let base = model.predict(&images).map_err(err)?;
        let mut order = classes.clone();
        order.shuffle(&mut rng);
        let mut permuted = model.clone();
        permuted.pool.reorder(&order).map_err(err)?;
        permuted.bank.reorder(&order).map_err(err)?;
        let probs = permuted.predict(&images).map_err(err)?;
        let n = classes.len();
        for row in 0..4 {
            for (j, &src) in order.iter().enumerate() {
                let a = probs.data()[row * n + j];
                let b = base.data()[row * n + permuted.pool.entries()[j].class_id];
                ensure(permuted.pool.entries()[j].class_id == src, "reorder mismatch")?;
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure(worst <= 1e-10, format!("max abs diff {worst:.3e}"))?;
    Ok(format!("10 random permutations of 7 prompts, max abs diff {worst:.1e}"))
}

// ---------------------------------------------------------- metric oracles

/// Ranks by counting (no sorting): the number of samples ahead of `i`.
fn oracle_ap(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n = scores.len();
    let rank = |i: usize| {
        1 + (0..n)
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count()
    };
    let mut positives: Vec<usize> = (0..n).filter(|&i| labels[i]).collect();
    if positives.is_empty() {
        return None;
    }
    positives.sort_by_key(|&i| rank(i));
    let mut sum = 0.0;
    for &i in &positives {
        let r = rank(i);
        let hits = positives.iter().filter(|&&j| rank(j) <= r).count();
        sum += hits as f64 / r as f64;
    }
    Some(sum / positives.len() as f64)
}

fn criterion_metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut ap_cases = 0;
    for len in 1..=8usize {
        let scores_sets = [
            (0..len).map(|_| rng.random::<f64>()).collect::<Vec<_>>(),
            (0..len).map(|_| f64::from(rng.random_range(0..3u8))).collect(),
        ];
        for scores in &scores_sets {
            for bits in 0..(1u32 << len) {
                let labels: Vec<bool> = (0..len).map(|i| bits >> i & 1 == 1).collect();
                let got = average_precision(scores, &labels);
                let want = oracle_ap(scores, &labels);
                ensure(got == want, format!("AP {scores:?} {labels:?}: {got:?} vs {want:?}"))?;
                ap_cases += 1;
            }
        }
    }

    let mut bce_worst: f64 = 0.0;
    for _ in 0..100 {
        let z: Vec<f64> = (0..12).map(|_| rng.random_range(-8.0..8.0)).collect();
        let y: Vec<f64> = (0..12).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        let want = -z
            .iter()
            .zip(&y)
            .map(|(&z, &y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                y * p.ln() + (1.0 - y) * (1.0 - p).ln()
            })
            .sum::<f64>()
            / 12.0;
        let tape = Tape::new();
        let zt = tape.constant(Tensor::new(vec![3, 4], z).unwrap());
        let cfg = AslConfig {
            gamma_pos: 0.0,
            gamma_neg: 0.0,
            ..AslConfig::default()
        };
        let got = asl_loss(&zt, &Tensor::new(vec![3, 4], y).unwrap(), &cfg).map_err(err)?.item();
        bce_worst = bce_worst.max((got - want).abs());
    }
    ensure(bce_worst <= 1e-12, format!("ASL(0) vs BCE diff {bce_worst:.2e}"))?;

    let mut forget_worst: f64 = 0.0;
    for _ in 0..100 {
        let t = rng.random_range(1..7usize);
        let rows: Vec<Vec<f64>> = (0..t).map(|r| (0..=r).map(|_| rng.random::<f64>()).collect()).collect();
        let last = &rows[t - 1];
        // Average over earlier tasks of the drop from their best earlier
        // score, counting improvements as zero.
        let want = if t == 1 {
            0.0
        } else {
            (0..t - 1)
                .map(|j| {
                    let best = (j..t - 1).map(|l| rows[l][j]).fold(f64::MIN, f64::max);
                    (best - last[j]).max(0.0)
                })
                .sum::<f64>()
                / (t - 1) as f64
        };
        let got = forgetting(&AccuracyMatrix::from_rows(rows.clone()).map_err(err)?);
        forget_worst = forget_worst.max((got - want).abs());
    }
    ensure(forget_worst <= 1e-12, format!("forgetting diff {forget_worst:.2e}"))?;

    // Hand-counted fixtures: (scores, labels, cf1, of1).
    let fixtures: [(&[f64], &[f64], f64, f64); 3] = [
        // class 0: TP 1 FP 1; class 1: TP 1 FN 1 -> F1 2/3 each, pooled 4/6
        (&[0.9, 0.9, 0.8, 0.1, 0.1, 0.1], &[1., 1., 0., 1., 0., 0.], 2.0 / 3.0, 2.0 / 3.0),
        // class 0: TP 2; class 1: FP 1 FN 1 -> F1 1 and 0, pooled 4/6
        (&[0.7, 0.6, 0.5, 0.2, 0.1, 0.4], &[1., 0., 1., 0., 0., 1.], 0.5, 4.0 / 6.0),
        // nothing predicted: TP 0 everywhere
        (&[0.1, 0.2, 0.3, 0.4, 0.0, 0.49], &[1., 0., 0., 1., 1., 1.], 0.0, 0.0),
    ];
    for (i, (s, l, cf1, of1)) in fixtures.iter().enumerate() {
        let s = Tensor::new(vec![3, 2], s.to_vec()).unwrap();
        let l = Tensor::new(vec![3, 2], l.to_vec()).unwrap();
        let (c, o) = cf1_of1(&s, &l, 0.5).map_err(err)?;
        ensure(
            (c - cf1).abs() < 1e-15 && (o - of1).abs() < 1e-15,
            format!("F1 fixture {i}: got ({c}, {o}), want ({cf1}, {of1})"),
        )?;
    }
    Ok(format!(
        "AP exact on {ap_cases} label vectors; ASL(0)-BCE {bce_worst:.1e}; forgetting {forget_worst:.1e}; 3 F1 fixtures"
    ))
}

// ----------------------------------------------------- protocol arithmetic

fn random_dataset(n_classes: usize, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |count: usize| -> Vec<Sample> {
        (0..count)
            .map(|_| {
                let mut labels = vec![0u8; n_classes];
                for _ in 0..rng.random_range(1..4) {
                    labels[rng.random_range(0..n_classes)] = 1;
                }
                Sample {
                    image: vec![0.0; 4],
                    labels,
                }
            })
            .collect()
    };
    let train = make(n);
    let test = make(n / 2);
    Dataset {
        class_names: (0..n_classes).map(|c| format!("c{c:03}")).collect(),
        image_side: 2,
        train,
        test,
        spec_hash: "external".into(),
    }
}

fn criterion_protocol() -> Check {
    let cases = [(80, 40, 10, 5), (80, 0, 10, 8), (20, 4, 2, 9)];
    for (n, b, c, want) in cases {
        let got = task_splits(n, b, c).map_err(err)?.len();
        ensure(got == want, format!("({n}, B{b}, C{c}) gave {got} tasks, want {want}"))?;
        let ds = random_dataset(n, 2000, n as u64 + b as u64);
        let stream = build_task_stream(&ds, b, c).map_err(err)?;
        let mut seen = BTreeSet::new();
        let mut prev_eval_classes = 0;
        for t in &stream.tasks {
            for &k in &t.classes {
                ensure(seen.insert(k), format!("class {k} in two tasks"))?;
            }
            let current: BTreeSet<usize> = t.classes.iter().copied().collect();
            let members: BTreeSet<usize> = t.train.iter().copied().collect();
            for (i, s) in ds.train.iter().enumerate() {
                let has = s.positives().any(|k| current.contains(&k));
                ensure(has == members.contains(&i), format!("task {} membership of image {i}", t.stage))?;
            }
            let learned: BTreeSet<usize> = stream.learned_classes(t.stage).into_iter().collect();
            ensure(learned == seen, "learned classes differ from the union of tasks")?;
            ensure(learned.len() > prev_eval_classes, "eval class set did not grow")?;
            prev_eval_classes = learned.len();
            for i in stream.eval_indices(&ds, t.stage) {
                ensure(
                    ds.test[i].positives().any(|k| learned.contains(&k)),
                    "eval image without a learned class",
                )?;
            }
            let outside = ds
                .test
                .iter()
                .enumerate()
                .filter(|(_, s)| s.positives().any(|k| learned.contains(&k)))
                .count();
            ensure(outside == stream.eval_indices(&ds, t.stage).len(), "eval set misses images")?;
        }
        ensure(seen.len() == n, "classes not covered exactly once")?;
    }
    ensure(task_splits(80, 40, 7).is_err(), "non-divisible split accepted")?;
    Ok("5 / 8 / 9 tasks; disjoint, covering, cumulative eval sets".into())
}

// ---------------------------------------------------------- desk benchmark

struct Desk {
    config: RunConfig,
    bench: Dataset,
    backbone: EncoderParams,
    ca: Report,
    ca_json: String,
    ft: Report,
    noad: Report,
    pu: Report,
    seconds: f64,
}

fn desk_file() -> ConfigFile {
    ConfigFile::parse(DESK_CONFIG, "configs/desk.toml").expect("desk config parses")
}

fn run_desk() -> Result<Desk, String> {
    let start = Instant::now();
    let file = desk_file();
    let config = file.run_config().map_err(err)?;
    let bench = file.benchmark_dataset().map_err(err)?;
    let pre = file.pretrain_dataset().map_err(err)?;
    let backbone = simulate_pretraining(&config.model, &pre, &file.pretrain_config()).map_err(err)?;
    let run = |f: &dyn Fn(&mut RunConfig)| -> Result<Report, String> {
        let mut c = config.clone();
        f(&mut c);
        Ok(run_benchmark(&c, &bench, Some(backbone.clone()), None).map_err(err)?.report)
    };
    let ca = run(&|_| {})?;
    let ft = run(&|c| c.method = Method::FineTuning)?;
    let noad = run(&|c| c.ablation.no_adapters = true)?;
    let pu = run(&|c| c.ablation.prompts_unfrozen = true)?;
    Ok(Desk {
        ca_json: ca.to_json(),
        config,
        bench,
        backbone,
        ca,
        ft,
        noad,
        pu,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn desk() -> Result<&'static Desk, String> {
    static DESK: OnceLock<Result<Desk, String>> = OnceLock::new();
    DESK.get_or_init(run_desk).as_ref().map_err(Clone::clone)
}

fn pinned(label: &str, observed: f64, pinned: f64) -> String {
    let drift = (observed - pinned).abs();
    let flag = if drift > 5e-5 { " (differs from pinned)" } else { "" };
    format!("{label} {observed:.4} [pinned {pinned:.4}]{flag}")
}

fn criterion_desk() -> Check {
    let d = desk()?;
    let ca_s1 = d.ca.sessions[0].map;
    let noad_s1 = d.noad.sessions[0].map;
    let facts = [
        pinned("ca last", d.ca.last_map, PINNED_CA_LAST),
        pinned("ft last", d.ft.last_map, PINNED_FT_LAST),
        pinned("ca forgetting", d.ca.forgetting, PINNED_CA_FORGETTING),
        pinned("ft forgetting", d.ft.forgetting, PINNED_FT_FORGETTING),
        pinned("ca stage-1", ca_s1, PINNED_CA_STAGE1),
        pinned("adapter-free stage-1", noad_s1, PINNED_NOAD_STAGE1),
        pinned("prompts_unfrozen last", d.pu.last_map, PINNED_PU_LAST),
    ]
    .join("; ");
    ensure(d.ca.last_map > d.ft.last_map, format!("(a) last mAP not above fine-tuning: {facts}"))?;
    ensure(d.ca.forgetting < d.ft.forgetting, format!("(a) forgetting not below fine-tuning: {facts}"))?;
    ensure(noad_s1 < ca_s1, format!("(b) adapter-free stage-1 not lower: {facts}"))?;
    ensure(d.pu.last_map < d.ca.last_map, format!("(c) prompts_unfrozen last not lower: {facts}"))?;
    ensure(d.seconds < 600.0, format!("took {:.0}s (limit 600s)", d.seconds))?;
    Ok(format!("{facts}; {:.0}s", d.seconds))
}

fn criterion_determinism() -> Check {
    let d = desk()?;
    let file = desk_file();
    let bench = file.benchmark_dataset().map_err(err)?;
    let pre = file.pretrain_dataset().map_err(err)?;
    let backbone = simulate_pretraining(&d.config.model, &pre, &file.pretrain_config()).map_err(err)?;
    ensure(backbone == d.backbone, "pretraining is not reproducible")?;
    let again = run_benchmark(&d.config, &bench, Some(backbone), None).map_err(err)?.report.to_json();
    ensure(again == d.ca_json, "report JSON differs between runs")?;
    let digest = hex::encode(Sha256::digest(again.as_bytes()));
    Ok(format!("report JSON byte-identical ({} bytes, sha256 {})", again.len(), &digest[..16]))
}

fn criterion_param_audit() -> Check {
    let d = desk()?;
    let dim = d.config.model.dim;
    for r in [&d.ca, &d.noad] {
        for (t, &count) in r.trainable_params.iter().enumerate().skip(1) {
            let classes = d.config.increment;
            let want = classes * (2 * dim + 1);
            ensure(count == want, format!("stage {}: {count} trainable, want {want}", t + 1))?;
        }
    }
    Ok(format!(
        "stages 2..3 train {} scalars = 4 x (2 x {dim} + 1); stage 1 trains {}",
        d.ca.trainable_params[1], d.ca.trainable_params[0]
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("1 gradient suite", criterion_gradients),
        ("2 zero-init adapter equivalence", criterion_zero_adapters),
        ("3 freeze parity", || criterion_freeze_parity(desk()?)),
        ("4 prompt permutation equivariance", criterion_permutation),
        ("5 metric oracles", criterion_metrics),
        ("6 protocol arithmetic", criterion_protocol),
        ("7 desk relational benchmark", criterion_desk),
        ("8 determinism", criterion_determinism),
        ("9 parameter-efficiency audit", criterion_param_audit),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("PASS [{name}] {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL [{name}] {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
