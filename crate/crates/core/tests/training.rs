use std::sync::atomic::{AtomicUsize, Ordering};

use fusereader::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use fusereader::training::*;
use fusereader::{Error, Result};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn store_with(values: &[(&str, Vec<f64>)]) -> (ParamStore, Vec<ParamId>) {
    let mut s = ParamStore::new();
    let ids = values
        .iter()
        .map(|(n, v)| s.add(*n, Tensor::vector(v.clone()).unwrap()).unwrap())
        .collect();
    (s, ids)
}

#[test]
fn zero_gradient_adam_is_identity() {
    let (mut s, ids) = store_with(&[("a.w", vec![1.5, -2.0, 0.25])]);
    let mut opt = Optimizer::new(OptimizerConfig::adam(0.1)).unwrap();
    for _ in 0..5 {
        s.zero_grad();
        opt.step(&mut s).unwrap();
    }
    assert_eq!(s.get(ids[0]).data(), &[1.5, -2.0, 0.25]);
}

#[test]
fn zero_gradient_adamw_decays() {
    let (mut s, ids) = store_with(&[("a.w", vec![1.5, -2.0])]);
    let mut opt = Optimizer::new(OptimizerConfig::adamw(0.1, 0.01)).unwrap();
    s.zero_grad();
    opt.step(&mut s).unwrap();
    assert_eq!(s.get(ids[0]).data(), &[1.5 * (1.0 - 0.001), -2.0 * (1.0 - 0.001)]);
}

// A hand-written Adam on a scalar, used as the oracle for the first steps.
#[test]
fn adam_matches_scalar_reference() {
    let (mut s, ids) = store_with(&[("a.w", vec![5.0])]);
    let mut opt = Optimizer::new(OptimizerConfig::adam(0.1)).unwrap();
    let (mut theta, mut m, mut v) = (5.0f64, 0.0f64, 0.0f64);
    for t in 1..=20 {
        let g = 2.0 * theta;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        theta -= 0.1 * mh / (vh.sqrt() + 1e-8);

        s.zero_grad();
        let x = s.get(ids[0]).data()[0];
        s.get_mut(ids[0]).accumulate_grad(&[2.0 * x], 1.0).unwrap();
        opt.step(&mut s).unwrap();
    }
    assert!((s.get(ids[0]).data()[0] - theta).abs() < 1e-12);
}

#[test]
fn adam_minimises_a_parabola() {
    let (mut s, ids) = store_with(&[("a.w", vec![5.0])]);
    let mut opt = Optimizer::new(OptimizerConfig::adam(0.1)).unwrap();
    for _ in 0..500 {
        s.zero_grad();
        let tape = Tape::with_params(&s);
        let w = tape.param(ids[0]);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        drop(tape);
        s.accumulate(&g, 1.0).unwrap();
        opt.step(&mut s).unwrap();
    }
    let theta = s.get(ids[0]).data()[0];
    assert!(theta.abs() < 1e-2, "theta = {theta}");
}

#[test]
fn missing_gradient_is_a_contract_error() {
    let mut s = ParamStore::new();
    let id = s.add("a.w", Tensor::vector(vec![1.0]).unwrap()).unwrap();
    s.get_mut(id).set_requires_grad(false);
    s.get_mut(id).set_requires_grad(true);
    let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
    assert!(matches!(opt.step(&mut s), Err(Error::Contract(_))));
}

#[test]
fn optimizer_config_is_validated() {
    assert!(Optimizer::new(OptimizerConfig { beta1: 1.0, ..Default::default() }).is_err());
    assert!(Optimizer::new(OptimizerConfig { lr: 0.0, ..Default::default() }).is_err());
    assert!(Optimizer::new(OptimizerConfig { weight_decay: -1.0, ..Default::default() }).is_err());
}

#[test]
fn freeze_spec_resolution() {
    let (mut s, _) = store_with(&[("a.w", vec![1.0]), ("b.w", vec![2.0]), ("b.v", vec![3.0])]);
    assert!(matches!(apply_freeze(&mut s, &FreezeSpec::new(["zzz"])), Err(Error::Config(_))));
    let all = apply_freeze(&mut s, &FreezeSpec::default()).unwrap();
    assert_eq!(all.len(), 3);
    let some = apply_freeze(&mut s, &FreezeSpec::new(["b"])).unwrap();
    assert_eq!(some.len(), 1);
    // A later spec replaces the earlier one.
    let again = apply_freeze(&mut s, &FreezeSpec::new(["a"])).unwrap();
    assert_eq!(again.len(), 2);
}

/// Two-group linear regressor `y = a·x + b·x`, one scalar target per example.
struct TwoGroups {
    a: ParamId,
    b: ParamId,
}

impl TwoGroups {
    fn predict(&self, tape: &Tape, x: &[f64]) -> Result<Var> {
        let xv = tape.constant(vec![x.len()], x.to_vec())?;
        let s = tape.add(tape.param(self.a), tape.param(self.b))?;
        let p = tape.mul(s, xv)?;
        tape.sum(p)
    }
}

impl Trainable for TwoGroups {
    type Example = (Vec<f64>, f64);

    fn loss(&self, tape: &Tape, ex: &Self::Example, _rng: &mut StdRng) -> Result<Var> {
        let p = self.predict(tape, &ex.0)?;
        let d = tape.add_scalar(p, -ex.1)?;
        tape.mul(d, d)
    }

    fn evaluate(&self, store: &ParamStore, xs: &[Self::Example], _t: usize) -> Result<Evaluation> {
        let tape = Tape::inference(store);
        let mut total = 0.0;
        for ex in xs {
            let v = self.loss(&tape, ex, &mut StdRng::seed_from_u64(0))?;
            total += tape.item(v)?;
        }
        Ok(Evaluation {
            loss: total / xs.len() as f64,
            ..Default::default()
        })
    }
}

fn regression() -> (ParamStore, TwoGroups, Vec<(Vec<f64>, f64)>) {
    let mut rng = StdRng::seed_from_u64(1);
    let mut s = ParamStore::new();
    let a = s.add("encoder1.w", Tensor::randn(&[3], 1.0, &mut rng)).unwrap();
    let b = s.add("head.w", Tensor::randn(&[3], 1.0, &mut rng)).unwrap();
    let truth = [0.5, -1.0, 2.0];
    let data = (0..40)
        .map(|_| {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = x.iter().zip(truth).map(|(a, b)| a * b).sum();
            (x, y)
        })
        .collect();
    (s, TwoGroups { a, b }, data)
}

#[test]
fn frozen_group_is_bitwise_unchanged_after_100_steps() {
    let (mut s, model, data) = regression();
    let before = s.group_hash("encoder1");
    let head_before = s.group_hash("head");
    let cfg = TrainConfig {
        batch_size: 4,
        max_epochs: 100,
        max_steps: Some(100),
        early_stop: EarlyStopConfig::new(1000, Monitor::ValLoss),
        freeze: FreezeSpec::new(["encoder1"]),
        optimizer: OptimizerConfig::adamw(0.01, 0.01),
        ..Default::default()
    };
    let r = fit(&model, &mut s, &data, &data, &cfg).unwrap();
    assert_eq!(r.steps, 100);
    assert_eq!(s.group_hash("encoder1"), before);
    assert_ne!(s.group_hash("head"), head_before);
}

#[test]
fn freezing_everything_keeps_the_loss_constant() {
    let (mut s, model, data) = regression();
    let cfg = TrainConfig {
        batch_size: 8,
        max_epochs: 5,
        early_stop: EarlyStopConfig::new(10, Monitor::ValLoss),
        freeze: FreezeSpec::new(["encoder1", "head"]),
        ..Default::default()
    };
    let r = fit(&model, &mut s, &data, &data, &cfg).unwrap();
    let losses: Vec<f64> = r.log.entries.iter().map(|e| e.val_metric).collect();
    assert!(losses.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn fit_reduces_loss_and_is_reproducible() {
    let run = |threads| {
        let (mut s, model, data) = regression();
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 30,
            optimizer: OptimizerConfig::adam(0.05),
            threads,
            seed: 7,
            ..Default::default()
        };
        let r = fit(&model, &mut s, &data, &data, &cfg).unwrap();
        (r.log, s.snapshot())
    };
    let (log, snap) = run(1);
    let first = log.entries[0].val_metric;
    let best = log.entries.iter().map(|e| e.val_metric).fold(f64::INFINITY, f64::min);
    assert!(best < first * 0.1, "loss {first} -> {best}");
    assert_eq!(run(1), (log.clone(), snap.clone()));
    assert_eq!(run(3), (log, snap));
}

#[test]
fn fit_rejects_empty_training_set() {
    let (mut s, model, data) = regression();
    let err = fit(&model, &mut s, &[], &data, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

/// Model whose validation metric follows a fixed script, one value per epoch.
struct Scripted {
    w: ParamId,
    series: Vec<f64>,
    calls: AtomicUsize,
}

impl Trainable for Scripted {
    type Example = ();

    fn loss(&self, tape: &Tape, _: &(), _: &mut StdRng) -> Result<Var> {
        let w = tape.param(self.w);
        let sq = tape.mul(w, w)?;
        tape.sum(sq)
    }

    fn evaluate(&self, _: &ParamStore, _: &[()], _: usize) -> Result<Evaluation> {
        let i = self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(Evaluation {
            loss: 0.0,
            accuracy: Some(self.series[i.min(self.series.len() - 1)]),
            f1: None,
        })
    }
}

fn scripted_epochs(series: Vec<f64>, patience: usize, max_epochs: usize) -> FitResult {
    let mut s = ParamStore::new();
    let w = s.add("head.w", Tensor::vector(vec![1.0]).unwrap()).unwrap();
    let model = Scripted {
        w,
        series,
        calls: AtomicUsize::new(0),
    };
    let cfg = TrainConfig {
        batch_size: 1,
        max_epochs,
        early_stop: EarlyStopConfig::new(patience, Monitor::ValAccuracy),
        ..Default::default()
    };
    fit(&model, &mut s, &[()], &[()], &cfg).unwrap()
}

#[test]
fn early_stopping_fires_after_plateau() {
    for k in [1, 3, 5] {
        for patience in [1, 2, 3] {
            let series: Vec<f64> = (1..=k).map(|e| e as f64 / 10.0).collect();
            let r = scripted_epochs(series, patience, 50);
            assert_eq!(r.log.entries.len(), k + patience, "k={k} patience={patience}");
            assert!(r.stopped_early);
            assert_eq!(r.best_epoch, k);
            assert!(r.log.entries.last().unwrap().stopped);
        }
    }
}

#[test]
fn improving_metric_runs_to_max_epochs() {
    let r = scripted_epochs((1..=20).map(f64::from).collect(), 2, 12);
    assert_eq!(r.log.entries.len(), 12);
    assert!(!r.stopped_early);
}

#[test]
fn early_stopping_unit_rules() {
    assert!(EarlyStopping::new(EarlyStopConfig::new(0, Monitor::ValLoss)).is_err());
    let mut e = EarlyStopping::new(EarlyStopConfig::new(2, Monitor::ValLoss)).unwrap();
    assert!(e.observe(1.0));
    assert!(e.observe(0.5));
    assert!(!e.observe(0.5));
    assert!(!e.should_stop());
    assert!(!e.observe(0.7));
    assert!(e.should_stop());
    assert_eq!(e.best_epoch(), 2);
}

#[test]
fn training_log_is_json_lines() {
    let r = scripted_epochs(vec![0.1, 0.2], 1, 10);
    let text = r.log.to_jsonl();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    let v: serde_json::Value = serde_json::from_str(lines[2]).unwrap();
    for key in ["epoch", "step", "train_loss", "val_metric", "stopped"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["stopped"], true);
}

#[test]
fn splits_follow_ratios() {
    let s = split_dataset(100_000, (0.875, 0.0625, 0.0625), 3).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (87_500, 6_250, 6_250));
    let s = split_dataset(10, (0.8, 0.1, 0.1), 3).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
    let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
    assert_eq!(s, split_dataset(10, (0.8, 0.1, 0.1), 3).unwrap());
    assert_ne!(s, split_dataset(10, (0.8, 0.1, 0.1), 4).unwrap());
    assert!(matches!(split_dataset(2, (0.8, 0.1, 0.1), 0), Err(Error::Config(_))));
    assert!(split_dataset(10, (0.5, 0.1, 0.1), 0).is_err());
}

#[test]
fn ordered_map_keeps_input_order() {
    let xs: Vec<usize> = (0..37).collect();
    let out = map_ordered(&xs, 4, |i, x| Ok(i * 100 + x)).unwrap();
    assert_eq!(out, xs.iter().map(|x| x * 101).collect::<Vec<_>>());
}
