//! Schedules and the optimizer recurrence, plus end-to-end training behaviour.

use std::ops::ControlFlow;

use cafpn_core::checks::toy_spec;
use cafpn_core::data::synth::synthetic_textures;
use cafpn_core::data::{AugMode, CropStyle, Normalization, Preprocessor};
use cafpn_core::params::ParamStore;
use cafpn_core::pyramid::Fusion;
use cafpn_core::trainer::run::predict_labels;
use cafpn_core::trainer::{
    evaluate, load_checkpoint, preset, save_checkpoint, train, CheckpointMeta, RunRecord,
    SgdNesterov, TrainConfig,
};
use cafpn_core::{Error, Model};
use cafpn_tensor::Tensor;

/// Piecewise-constant oracle written out from the recipe text.
fn staircase(epochs: usize, steps: &[(usize, f64)]) -> Vec<f64> {
    (0..epochs)
        .map(|e| steps.iter().rev().find(|&&(start, _)| e >= start).unwrap().1)
        .collect()
}

#[test]
fn preset_schedules_match_staircase_oracle() {
    let five_late = [(0, 0.1), (120, 0.02), (200, 0.004), (260, 0.0008)];
    let ten = [(0, 0.1), (100, 0.01), (150, 0.001), (200, 0.0001)];
    let five_early = [(0, 0.1), (30, 0.02), (60, 0.004), (90, 0.0008)];
    for (name, epochs, steps) in [
        ("cnh_aug", 300, &five_late[..]),
        ("cnh_mixup", 300, &five_late[..]),
        ("cnh_noaug", 120, &five_early[..]),
        ("tcnh_aug", 300, &ten[..]),
        ("tcnh_mixup", 300, &ten[..]),
        ("tcnh_noaug", 120, &five_early[..]),
    ] {
        let p = preset(name).unwrap();
        assert_eq!(p.epochs, epochs, "{name}");
        assert_eq!(p.lr_curve(), staircase(epochs, steps), "{name}");
    }
    let p = preset("cnh_aug").unwrap();
    assert_eq!(p.lr_at(150), 0.02);
    assert_eq!(p.lr_at(0), 0.1);
    assert_eq!((p.batch_size, preset("tcnh_aug").unwrap().batch_size), (64, 128));
}

#[test]
fn preset_weight_decay_mapping() {
    let wd = |n: &str| preset(n).unwrap().weight_decay;
    assert_eq!(wd("cnh_aug"), 5e-4);
    assert_eq!(wd("cnh_mixup"), 1e-4);
    assert_eq!(wd("tcnh_aug"), 1e-4);
    let m = preset("cnh_mixup").unwrap().mixup.unwrap();
    assert_eq!((m.alpha, m.disable_after_epoch), (1.0, 280));
    assert!(preset("cnh_aug").unwrap().mixup.is_none());
}

#[test]
fn invalid_milestones_are_rejected() {
    let mut p = preset("cnh_aug").unwrap();
    p.milestones = vec![(200, 5.0), (120, 5.0)];
    assert!(p.validate().is_err());
    p.milestones = vec![(120, 1.0)];
    assert!(p.validate().is_err());
    p.milestones = vec![(300, 5.0)];
    assert!(p.validate().is_err());
    assert!(matches!(preset("imagenet").unwrap_err(), Error::Config(_)));
}

fn scalar_store(v: f64) -> (ParamStore, cafpn_core::params::ParamId) {
    let mut s = ParamStore::new();
    let id = s.learnable("theta", Tensor::from_vec(&[1], vec![v]).unwrap());
    (s, id)
}

#[test]
fn plain_sgd_without_momentum_or_decay() {
    let (mut s, id) = scalar_store(2.0);
    let mut opt = SgdNesterov::new(0.0, 0.0);
    opt.step(&mut s, &[(id, Tensor::from_vec(&[1], vec![0.5]).unwrap())], 0.1).unwrap();
    assert_eq!(s.get(id).data()[0], 2.0 - 0.1 * 0.5);
    let before = s.get(id).clone();
    let mut opt = SgdNesterov::new(0.9, 0.0);
    opt.step(&mut s, &[(id, Tensor::zeros(&[1]))], 0.1).unwrap();
    assert_eq!(s.get(id), &before);
}

#[test]
fn nesterov_quadratic_matches_scalar_recurrence() {
    // f(θ) = a/2 · (θ − c)², ∇f = a(θ − c)
    let (a, c, lr, mu, wd) = (3.0, 0.7, 0.05, 0.9, 1e-3);
    let (mut s, id) = scalar_store(-1.2);
    let mut opt = SgdNesterov::new(mu, wd);
    let (mut theta, mut v) = (-1.2f64, 0.0f64);
    let mut losses = vec![a / 2.0 * (theta - c).powi(2)];
    for _ in 0..3 {
        let grad = a * (s.get(id).data()[0] - c);
        opt.step(&mut s, &[(id, Tensor::from_vec(&[1], vec![grad]).unwrap())], lr).unwrap();
        let g = a * (theta - c) + wd * theta;
        v = mu * v + g;
        theta -= lr * (g + mu * v);
        assert!((s.get(id).data()[0] - theta).abs() < 1e-15);
        assert!((opt.velocity(id).unwrap().data()[0] - v).abs() < 1e-15);
        losses.push(a / 2.0 * (theta - c).powi(2));
    }
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn non_finite_gradient_names_the_parameter() {
    let (mut s, id) = scalar_store(1.0);
    let other = s.learnable("head/fc/w", Tensor::zeros(&[2]));
    let mut opt = SgdNesterov::new(0.9, 0.0);
    let e = opt
        .step(
            &mut s,
            &[
                (id, Tensor::from_vec(&[1], vec![1.0]).unwrap()),
                (other, Tensor::from_vec(&[2], vec![f64::NAN, 1.0]).unwrap()),
            ],
            0.1,
        )
        .unwrap_err();
    assert!(matches!(e, Error::NonFiniteGradient { ref name, count: 1 } if name == "head/fc/w"), "{e}");
    assert_eq!(s.get(id).data()[0], 1.0, "no parameter moves on abort");
}

fn toy_setup(n_per_class: usize) -> (Model, cafpn_core::data::Dataset, Preprocessor, TrainConfig) {
    let ds = synthetic_textures(3, n_per_class, 16, 21);
    let model = Model::new(toy_spec(Fusion::SrrCa, 3), 5).unwrap();
    let prep = Preprocessor {
        style: CropStyle::PadCrop { pad: 2, crop: 16 },
        norm: Normalization::fit(&ds.images).unwrap(),
        augment: true,
    };
    let mut cfg = preset("smoke").unwrap();
    cfg.seed = 13;
    (model, ds, prep, cfg)
}

fn learnable(model: &Model) -> Vec<Tensor> {
    model.store.learnable_ids().map(|id| model.store.get(id).clone()).collect()
}

#[test]
fn zero_learning_rate_leaves_weights_bit_identical() {
    let (mut model, ds, mut prep, mut cfg) = toy_setup(3);
    let ds = ds.subset(&[0, 1, 2, 3, 4, 5, 6, 7]);
    prep.augment = false;
    cfg.base_lr = 0.0;
    cfg.batch_size = 8;
    cfg.regime = AugMode::None;
    let before = learnable(&model);
    let rec = train(&mut model, &ds, None, &prep, &cfg, |_, _| ControlFlow::Continue(())).unwrap();
    assert_eq!(learnable(&model), before);
    let l0 = rec.epochs[0].train_loss;
    for e in &rec.epochs {
        assert!((e.train_loss - l0).abs() < 1e-12, "{} vs {l0}", e.train_loss);
        assert_eq!(e.lr, 0.0);
    }
}

#[test]
fn constant_class_zero_model_scores_class_share() {
    let (mut model, ds, prep, _) = toy_setup(4);
    let ds = ds.subset(&[0, 1, 4, 5, 6, 8, 9, 10, 11]);
    let w = model.store.id("head/fc/w").unwrap();
    let b = model.store.id("head/fc/b").unwrap();
    let ws = model.store.get(w).shape().to_vec();
    model.store.set(w, Tensor::zeros(&ws)).unwrap();
    model.store.set(b, Tensor::from_vec(&[3], vec![1.0, 0.0, 0.0]).unwrap()).unwrap();
    assert!(predict_labels(&model, &ds, &prep, 4).unwrap().iter().all(|&p| p == 0));
    let acc = evaluate(&model, &ds, &prep, 4).unwrap();
    assert_eq!(acc, ds.class_fraction(0));
    assert_eq!(acc, 2.0 / 9.0);
}

#[test]
fn class_count_mismatch_is_an_error() {
    let (mut model, _, prep, cfg) = toy_setup(2);
    let other = synthetic_textures(4, 2, 16, 0);
    assert!(matches!(evaluate(&model, &other, &prep, 4), Err(Error::Data(_))));
    assert!(train(&mut model, &other, None, &prep, &cfg, |_, _| ControlFlow::Continue(())).is_err());
}

#[test]
fn seeded_runs_are_reproducible_and_records_round_trip() {
    let run = || {
        let (mut model, ds, prep, cfg) = toy_setup(4);
        let rec = train(&mut model, &ds, Some(&ds), &prep, &cfg, |_, _| ControlFlow::Continue(())).unwrap();
        (rec, learnable(&model))
    };
    let (a, wa) = run();
    let (b, wb) = run();
    assert_eq!(a, b);
    assert_eq!(wa, wb);
    assert_eq!(a.epochs.len(), 3);
    for (i, e) in a.epochs.iter().enumerate() {
        assert_eq!(e.epoch, i);
        assert!((0.0..=1.0).contains(&e.train_acc));
        assert!((0.0..=1.0).contains(&e.val_acc.unwrap()));
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.csv");
    a.write_csv(&p).unwrap();
    assert!(std::fs::read_to_string(&p).unwrap().starts_with("epoch,lr,train_loss,train_acc,val_acc\n"));
    assert_eq!(RunRecord::read_csv(&p).unwrap().epochs, a.epochs);
}

#[test]
fn early_stop_callback_ends_the_run() {
    let (mut model, ds, prep, mut cfg) = toy_setup(2);
    cfg.epochs = 10;
    let rec = train(&mut model, &ds, None, &prep, &cfg, |_, r| {
        if r.epoch == 1 { ControlFlow::Break(()) } else { ControlFlow::Continue(()) }
    })
    .unwrap();
    assert_eq!(rec.epochs.len(), 2);
}

#[test]
fn checkpoint_round_trip_reproduces_accuracy_bit_exactly() {
    let (mut model, ds, prep, cfg) = toy_setup(3);
    train(&mut model, &ds, None, &prep, &cfg, |_, _| ControlFlow::Continue(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.tnsr");
    let meta = CheckpointMeta {
        spec: model.spec.clone(),
        preprocessor: prep.clone(),
        class_names: ds.class_names.clone(),
    };
    save_checkpoint(&model, &meta, &path).unwrap();
    let (loaded, meta2) = load_checkpoint(&path).unwrap();
    assert_eq!(meta2, meta);
    for id in model.store.ids() {
        assert_eq!(model.store.get(id), loaded.store.get(id), "{}", model.store.name(id));
    }
    let x = Tensor::stack(&ds.images[..4].iter().map(|i| prep.norm.apply(i)).collect::<Vec<_>>()).unwrap();
    assert_eq!(model.predict(&x).unwrap(), loaded.predict(&x).unwrap());
    assert_eq!(
        evaluate(&model, &ds, &prep, 4).unwrap().to_bits(),
        evaluate(&loaded, &ds, &prep, 4).unwrap().to_bits()
    );
}
