use super::*;
use crate::mask::{MaskTransformConfig, Variant};
use crate::net::{add_domain, ArchSpec};

/// Two classes: bright left half or bright right half, plus mild noise.
fn toy(n: usize, seed: u64) -> DomainDataset {
    let split = |n: usize, stream: u64| {
        let mut r = rng::stream(seed, stream);
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2;
            for _ in 0..16 {
                for col in 0..16 {
                    let on = (col < 8) == (label == 0);
                    let base = if on { 0.8 } else { 0.2 };
                    pixels.push((base + r.random_range(-0.15f32..0.15)).clamp(0.0, 1.0));
                }
            }
            labels.push(label);
        }
        Split { height: 16, width: 16, pixels, labels }
    };
    DomainDataset { name: "toy".into(), num_classes: 2, seed, train: split(n, 1), test: split(n / 2, 2) }
}

fn setup(variant: Variant) -> (Backbone, DomainParams) {
    let bb = Backbone::build(ArchSpec::smallnet(), 3).unwrap();
    let d = add_domain(&bb, "toy", 2, MaskTransformConfig::new(variant), 4).unwrap();
    (bb, d)
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { schedule: Schedule::new(epochs, epochs, 10.0).unwrap(), ..TrainConfig::default() }
}

#[test]
fn schedule_presets_and_validation() {
    assert_eq!(Schedule::preset("desk"), Some(Schedule::DESK));
    assert_eq!(Schedule::preset("bench1").unwrap().decay_epoch, 10);
    assert_eq!(Schedule::preset("decathlon").unwrap().epochs, 60);
    assert!(Schedule::preset("x").is_none());
    assert!(Schedule::new(5, 6, 10.0).is_err());
    assert!(Schedule::new(5, 3, 1.0).is_err());
    let s = Schedule::BENCH1;
    assert_eq!(s.lr_at(1e-4, 9), 1e-4);
    assert_eq!(s.lr_at(1e-4, 10), 1e-4 / 10.0);
}

#[test]
fn groups_partition_trainable_parameters() {
    for variant in [Variant::Full, Variant::Simple, Variant::Piggyback, Variant::FullNoBias] {
        let (bb, d) = setup(variant);
        let g = make_groups(&d, Protocol::Masks);
        let mut all: Vec<_> = g.all().collect();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n, "{variant}: duplicate parameter");
        assert!(all.iter().all(|id| !matches!(id, ParamId::Weight(_))));
        let (x, labels) = toy(4, 0).train.all();
        let mut bound: Vec<_> = domain_gradients(&bb, &d, &x, &labels, Protocol::Masks)
            .unwrap()
            .grads
            .into_iter()
            .map(|(id, _)| id)
            .collect();
        bound.sort();
        assert_eq!(bound, all, "{variant}");
        assert_eq!(g.sgd, vec![ParamId::HeadWeight, ParamId::HeadBias]);
        if variant == Variant::Piggyback {
            assert!(g.adam.iter().all(|id| matches!(id, ParamId::Mask(_) | ParamId::BnGamma(_) | ParamId::BnBeta(_))));
        }
    }
    let (_, d) = setup(Variant::Full);
    assert!(make_groups(&d, Protocol::ClassifierOnly).adam.is_empty());
}

#[test]
fn zero_epochs_leave_domain_unchanged() {
    let (bb, mut d) = setup(Variant::Full);
    let before = d.clone();
    let r = train_domain(&bb, &mut d, &toy(8, 0), &quick(0), 1).unwrap();
    assert!(r.epochs.is_empty());
    assert_eq!(d, before);
}

#[test]
fn class_mismatch_is_rejected() {
    let bb = Backbone::build(ArchSpec::smallnet(), 3).unwrap();
    let mut d = add_domain(&bb, "x", 3, MaskTransformConfig::new(Variant::Full), 4).unwrap();
    let err = train_domain(&bb, &mut d, &toy(8, 0), &quick(1), 1).unwrap_err();
    assert!(matches!(err, Error::ClassMismatch { domain: 3, dataset: 2 }));
}

#[test]
fn toy_problem_is_learned() {
    let (bb, mut d) = setup(Variant::Full);
    let digest = bb.digest();
    let r = train_domain(&bb, &mut d, &toy(128, 0), &quick(10), 1).unwrap();
    assert!(r.final_train_accuracy().unwrap() >= 0.99, "{:?}", r.epochs.last());
    assert_eq!(bb.digest(), digest);
}

#[test]
fn training_is_deterministic() {
    let data = toy(64, 5);
    let cfg = TrainConfig { flip: true, ..quick(2) };
    let run = || {
        let (bb, mut d) = setup(Variant::Full);
        let r = train_domain(&bb, &mut d, &data, &cfg, 9).unwrap();
        (d, r)
    };
    let (d1, r1) = run();
    let (d2, r2) = run();
    assert_eq!(d1, d2);
    assert!(r1.same_results(&r2));
}

#[test]
fn full_batch_loss_decreases() {
    let (bb, mut d) = setup(Variant::Full);
    let (x, labels) = toy(64, 2).train.all();
    let mut t = DomainTrainer::new(&d, TrainConfig::default()).unwrap();
    t.start_epoch(0).unwrap();
    let losses: Vec<f32> = (0..6).map(|_| t.step(&bb, &mut d, &x, &labels).unwrap().0).collect();
    let increases: Vec<f32> = losses.windows(2).map(|w| w[1] - w[0]).filter(|&d| d > 0.0).collect();
    assert!(increases.len() <= 1 && increases.iter().all(|&d| d <= 1e-3), "{losses:?}");
}

#[test]
fn lr_after_decay_is_exact() {
    let (_, d) = setup(Variant::Full);
    let cfg = TrainConfig { schedule: Schedule::BENCH1, ..TrainConfig::default() };
    let mut t = DomainTrainer::new(&d, cfg).unwrap();
    t.start_epoch(10).unwrap();
    assert_eq!(t.adam.lr(), cfg.adam_lr / cfg.schedule.decay_factor);
    assert_eq!(t.sgd.lr(), cfg.sgd_lr / cfg.schedule.decay_factor);
    t.start_epoch(9).unwrap();
    assert_eq!(t.adam.lr(), cfg.adam_lr);
}

#[test]
fn every_grouped_parameter_receives_gradient() {
    for variant in [Variant::Full, Variant::Simple, Variant::Piggyback] {
        let (bb, mut d) = setup(variant);
        let mut r = rng::stream(77, 0);
        // The identity init sets k2 = k3 = 0, which zeroes the mask multiplier
        // k2 + k3·W; move the scalars off it first.
        for layer in &mut d.layers {
            for k in &mut layer.scalars.k {
                if let Scalar::Learned(t) = k {
                    for v in t.data_mut() {
                        *v += r.random_range(0.1f32..0.5);
                    }
                }
            }
        }
        let x = Tensor::new(&[8, 1, 16, 16], rng::uniform_vec(&mut r, 8 * 256, 0.0, 1.0)).unwrap();
        let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let eval = domain_gradients(&bb, &d, &x, &labels, Protocol::Masks).unwrap();
        for (id, g) in &eval.grads {
            assert!(g.data().iter().any(|&v| v != 0.0), "{variant}: dead parameter {id:?}");
        }
        assert_eq!(eval.grads.len(), make_groups(&d, Protocol::Masks).all().count());
    }
}

#[test]
fn nan_input_aborts() {
    let (bb, mut d) = setup(Variant::Full);
    let mut data = toy(8, 0);
    data.train.pixels[3] = f32::NAN;
    let err = train_domain(&bb, &mut d, &data, &quick(1), 1).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
}

#[test]
fn classifier_only_leaves_masks_and_bn() {
    let (bb, mut d) = setup(Variant::Full);
    let before = d.clone();
    let cfg = TrainConfig { protocol: Protocol::ClassifierOnly, ..quick(1) };
    train_domain(&bb, &mut d, &toy(32, 0), &cfg, 1).unwrap();
    assert_eq!(d.layers, before.layers);
    assert_eq!(d.bn, before.bn);
    assert_ne!(d.head, before.head);
}

#[test]
fn base_training_learns_toy() {
    let mut m = BaseModel::build(ArchSpec::tinynet(), 2, 1).unwrap();
    let cfg = BaseConfig { schedule: Schedule::new(3, 3, 10.0).unwrap(), ..BaseConfig::default() };
    let r = train_base(&mut m, &toy(64, 1), &cfg, 2).unwrap();
    assert!(r.test_accuracy >= 0.95, "{}", r.test_accuracy);
    let (ft, _) = finetune(&m.backbone, &toy(32, 3), &cfg, 4).unwrap();
    assert_ne!(ft.backbone.digest(), m.backbone.digest());
}

#[test]
fn masks_start_without_gradient_under_identity_init() {
    let (bb, d) = setup(Variant::Full);
    let (x, labels) = toy(8, 0).train.all();
    let eval = domain_gradients(&bb, &d, &x, &labels, Protocol::Masks).unwrap();
    for (id, g) in &eval.grads {
        let dead = g.data().iter().all(|&v| v == 0.0);
        assert_eq!(dead, matches!(id, ParamId::Mask(_)), "{id:?}");
    }
}
