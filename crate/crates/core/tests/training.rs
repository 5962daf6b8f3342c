//! Trainer invariants: masking, determinism, the objective identity and
//! the two-stage schedule.

use freegrain::diffcore::{Graph, Tensor};
use freegrain::losses::hier_loss;
use freegrain::model::{init, CheckpointMeta, ModelConfig, ModelParams};
use freegrain::pruning::{random_prune, Stratify};
use freegrain::rng::{gaussian, stage_rng};
use freegrain::synthgen::{attach_synthetic_text, generate, Dataset, GenParams};
use freegrain::taxonomy::{LabelPath, Taxonomy};
use freegrain::trainer::{
    model_config, split_holdout, train, train_with_heldout, Regime, TrainConfig, TwoStage,
};
use rand::Rng;

fn small_data(seed: u64) -> Dataset {
    let t = Taxonomy::balanced(&[2, 4, 8]).unwrap();
    let d = generate(
        &t,
        &GenParams {
            per_leaf: 6,
            feature_dim: 8,
            seed,
            ..GenParams::default()
        },
    )
    .unwrap();
    attach_synthetic_text(&d, 6, 0.9, seed).unwrap()
}

fn quick(regime: Regime) -> TrainConfig {
    TrainConfig {
        epochs: 4,
        batch_size: 16,
        warmup_epochs: 1,
        hidden_dims: vec![16, 16],
        ..TrainConfig::for_regime(regime)
    }
}

fn checkpoint(m: &ModelParams) -> Vec<u8> {
    let mut buf = Vec::new();
    m.save(&mut buf, &CheckpointMeta::default()).unwrap();
    buf
}

#[test]
fn heads_without_supervision_do_not_move() {
    let d = small_data(1);
    let pruned = random_prune(&d, &"100-50-0".parse().unwrap(), 1, Stratify::On).unwrap();
    assert!(pruned.samples.iter().all(|s| s.label.get(2).is_none()));
    let empty = pruned.subset(&[]);
    for regime in [Regime::HierOnly, Regime::TextAttr, Regime::TaxonSsl, Regime::Combined] {
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: pruned.len(),
            warmup_epochs: 0,
            ..quick(regime)
        };
        let before = init(model_config(&pruned, &cfg).unwrap()).unwrap();
        let out = train_with_heldout(&pruned, &empty, &cfg).unwrap();
        assert_eq!(out.steps.len(), 1);
        let moved = |i: usize| before.tensors()[i] != out.model.tensors()[i];
        for i in out.model.head_tensor_indices(2) {
            assert!(!moved(i), "{regime:?}: head 2 tensor {i} changed");
        }
        for i in out.model.head_tensor_indices(0) {
            assert!(moved(i), "{regime:?}: head 0 tensor {i} did not change");
        }
    }
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let d = small_data(2);
    for regime in [Regime::HierOnly, Regime::Combined] {
        let cfg = quick(regime);
        let a = train(&d, &cfg).unwrap();
        let b = train(&d, &cfg).unwrap();
        assert_eq!(checkpoint(&a.model), checkpoint(&b.model));
        assert_eq!(a.steps, b.steps);
        let other = train(&d, &TrainConfig { seed: 9, ..cfg }).unwrap();
        assert_ne!(checkpoint(&a.model), checkpoint(&other.model));
    }
}

#[test]
fn zero_alpha_text_run_equals_hier_only() {
    let d = small_data(3);
    let hier = train(&d, &quick(Regime::HierOnly)).unwrap();
    let text = train(
        &d,
        &TrainConfig {
            alpha: 0.0,
            ..quick(Regime::TextAttr)
        },
    )
    .unwrap();
    assert_eq!(checkpoint(&hier.model), checkpoint(&text.model));
}

#[test]
fn every_step_satisfies_the_objective_identity() {
    let d = small_data(4);
    let pruned = random_prune(&d, &"100-50-10".parse().unwrap(), 4, Stratify::On).unwrap();
    let cfg = TrainConfig {
        alpha: 0.7,
        lambda_pl: 0.3,
        lambda_tacl: 0.2,
        ..quick(Regime::Combined)
    };
    let out = train(&pruned, &cfg).unwrap();
    for s in &out.steps {
        assert_eq!(s.loss.total, s.loss.recomputed_total());
    }
}

#[test]
fn two_stage_switch_is_visible_in_the_step_log() {
    let d = small_data(5);
    let cfg = TrainConfig {
        epochs: 6,
        two_stage: Some(TwoStage {
            first: Regime::HierOnly,
            switch_epoch: 3,
        }),
        ..quick(Regime::TextAttr)
    };
    let out = train(&d, &cfg).unwrap();
    for s in &out.steps {
        if s.epoch < 3 {
            assert_eq!(s.regime, Regime::HierOnly);
            assert_eq!(s.loss.text, 0.0);
        } else {
            assert_eq!(s.regime, Regime::TextAttr);
            assert!(s.loss.text > 0.0);
        }
    }
}

#[test]
fn held_out_split_is_stratified_and_disjoint() {
    let d = small_data(6);
    let (tr, held) = split_holdout(&d, 0.25, 7);
    assert_eq!(tr.len() + held.len(), d.len());
    for leaf in 0..8 {
        let count = held.samples.iter().filter(|s| s.label.get(2) == Some(leaf)).count();
        assert!((1..=2).contains(&count), "leaf {leaf}: {count}");
    }
    let mut ids: Vec<u64> = tr.samples.iter().chain(&held.samples).map(|s| s.id).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), d.len());
}

#[test]
fn batch_forward_equals_per_sample_forward() {
    let t = Taxonomy::balanced(&[2, 4]).unwrap();
    let model = init(ModelConfig::new(&t, 5, vec![7, 6], 3, 11)).unwrap();
    let mut rng = stage_rng(0, "rows");
    let x = Tensor::matrix(4, 5, (0..20).map(|_| gaussian(&mut rng)).collect()).unwrap();
    let batch = model.predict_logits(&x).unwrap();
    for i in 0..4 {
        let row = Tensor::matrix(1, 5, x.row(i).to_vec()).unwrap();
        let single = model.predict_logits(&row).unwrap();
        for (b, s) in batch.iter().zip(&single) {
            assert_eq!(b.row(i), s.row(0));
        }
    }
}

#[test]
fn model_parameter_gradients_match_finite_differences() {
    let t = Taxonomy::balanced(&[2, 4]).unwrap();
    for seed in 0..10 {
        let mut rng = stage_rng(seed, "model-grad");
        let mut model = init(ModelConfig::new(&t, 4, vec![6, 5], 3, seed)).unwrap();
        // Zero biases can put a pre-activation exactly on the ReLU kink.
        for layer in model.trunk.iter_mut().chain(model.heads.iter_mut()) {
            layer.bias.data_mut().iter_mut().for_each(|b| *b = 0.1 * gaussian(&mut rng));
        }
        let x = Tensor::matrix(5, 4, (0..20).map(|_| gaussian(&mut rng)).collect()).unwrap();
        let labels: Vec<LabelPath> = (0..5)
            .map(|_| {
                let leaf = rng.random_range(0..4);
                let full = t.leaf_path(leaf).unwrap();
                if rng.random::<bool>() {
                    LabelPath::full(&full)
                } else {
                    LabelPath::new(vec![Some(full[0]), None]).unwrap()
                }
            })
            .collect();
        let loss = |m: &ModelParams, grads: bool| {
            let mut g = Graph::new();
            let p = m.bind(&mut g, grads).unwrap();
            let xv = g.constant(x.clone()).unwrap();
            let out = m.forward(&mut g, &p, xv).unwrap();
            let h = hier_loss(&mut g, &out.logits, &labels).unwrap();
            let value = g.value(h.total).item();
            if !grads {
                return (value, vec![]);
            }
            g.backward(h.total).unwrap();
            let gs: Vec<Tensor> = p
                .vars()
                .iter()
                .zip(m.tensors())
                .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            (value, gs)
        };
        let (_, analytic) = loss(&model, true);
        let h = 1e-6;
        for (ti, grad) in analytic.iter().enumerate() {
            for k in 0..grad.numel() {
                let mut plus = model.clone();
                plus.tensors_mut()[ti].data_mut()[k] += h;
                let mut minus = model.clone();
                minus.tensors_mut()[ti].data_mut()[k] -= h;
                let numeric = (loss(&plus, false).0 - loss(&minus, false).0) / (2.0 * h);
                let a = grad.data()[k];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(err <= 1e-4, "seed {seed} tensor {ti} element {k}: {a} vs {numeric}");
            }
        }
    }
}

#[test]
fn separable_data_is_fit_within_fifty_epochs() {
    let t = Taxonomy::balanced(&freegrain::synthgen::DEFAULT_LEVEL_SIZES).unwrap();
    let d = generate(&t, &GenParams::default()).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        heldout_fraction: 0.0,
        ..TrainConfig::default()
    };
    let out = train(&d, &cfg).unwrap();
    let r = freegrain::trainer::evaluate_model(&out.model, &d).unwrap();
    assert!(r.fpa >= 0.99, "training fpa {}", r.fpa);
}
