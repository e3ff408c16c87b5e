use p2lca_core::adapter::FreezePolicy;
use p2lca_core::gradcheck::{finite_difference_gradient, max_relative_error};
use p2lca_core::loss::{asl_loss, AslConfig};
use p2lca_core::model::Model;
use p2lca_core::p2l::{freeze_previous, PromptInit};
use p2lca_core::tape::Tape;
use p2lca_core::tensor::Tensor;
use p2lca_core::vit::ModelConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_cfg(seed: u64) -> ModelConfig {
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

/// Loss of the model with the named parameter replaced by `theta`.
fn loss_with(model: &Model, name: &str, theta: &Tensor, images: &Tensor, targets: &Tensor) -> f64 {
    let mut m = model.clone();
    m.visit_params_mut(&mut |n, d| {
        if n == name {
            d.copy_from_slice(theta.data());
        }
    });
    let tape = Tape::new();
    let bound = m.bind(&tape, None);
    let logits = bound.forward(&tape, images, &m.config).unwrap();
    asl_loss(&logits, targets, &AslConfig::default()).unwrap().item()
}

#[test]
fn frozen_backbone_prompt_and_head_grads() {
    for seed in 0..5 {
        let cfg = small_cfg(seed);
        let mut model = Model::new(cfg.clone(), None, true).unwrap();
        model.add_classes(&[0, 1], 1, &PromptInit::Random { seed }).unwrap();
        model.add_classes(&[2, 3], 2, &PromptInit::Random { seed }).unwrap();
        freeze_previous(&mut model.pool, &mut model.bank, 2);
        model.adapters.as_mut().unwrap().frozen = true;
        // make the adapters non-trivial so their path matters
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        model.visit_params_mut(&mut |n, d| {
            if n.starts_with("adapter.") || n.starts_with("prompt.") {
                let r = Tensor::randn(vec![d.len()], 0.5, &mut rng);
                d.copy_from_slice(r.data());
            }
        });
        let mask = model.trainable_mask(2, FreezePolicy::default());
        let images = Tensor::randn(vec![3, 8, 8], 1.0, &mut rng);
        let targets = Tensor::new(vec![3, 4], vec![1., 0., 0., 1., 0., 1., 1., 0., 1., 1., 0., 0.]).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape, Some(&mask));
        let logits = bound.forward(&tape, &images, &cfg).unwrap();
        let loss = asl_loss(&logits, &targets, &AslConfig::default()).unwrap();
        tape.backward(loss).unwrap();
        for (name, g) in bound.grads() {
            let theta = {
                let mut t = None;
                model.visit_params(&mut |n, s, d| {
                    if n == name {
                        t = Some(Tensor::new(s.to_vec(), d.to_vec()).unwrap());
                    }
                });
                t.unwrap()
            };
            let num = finite_difference_gradient(
                |th| Ok(loss_with(&model, &name, th, &images, &targets)),
                &theta,
                1e-5,
            )
            .unwrap();
            let err = max_relative_error(&g, &num, 1e-8);
            assert!(err <= 1e-4, "seed {seed} {name}: rel err {err}");
        }
    }
}
