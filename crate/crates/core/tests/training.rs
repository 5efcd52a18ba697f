use std::collections::HashSet;

use tsb_core::model::{forward_teacher_forced, ModelConfig, TsbParams};
use tsb_core::specgen::{generate_frame, ScenarioConfig};
use tsb_core::training::*;
use tsb_core::{Graph, Tensor};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        channels: 4,
        input_len: 16,
        horizon: 4,
        d_model: 16,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        bilstm_layers: 1,
        positional_encoding: true,
        causal_decoder: false,
    }
}

fn eight_samples() -> WindowSet {
    let scen = ScenarioConfig {
        channels: 4,
        slots: 200,
        period: 5,
        seed: 21,
        ..ScenarioConfig::default()
    };
    let series = generate_frame(&scen).unwrap().time_major();
    let norm = NormStats::fit(series.data());
    WindowSet::new(zscore_normalize(&series, &norm), (0..8).map(|i| i * 20).collect(), 16, 4).unwrap()
}

fn overfit_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.005,
        l2: 0.0,
        batch_size: 8,
        max_epochs: 200,
        patience: 200,
        seed: 4,
        ..TrainConfig::default()
    }
}

fn overfit() -> TrainOutcome {
    let set = eight_samples();
    train_from(TsbParams::init(&tiny_model(), 4).unwrap(), &set, &set, &overfit_config(), &mut |_| {}).unwrap()
}

#[test]
fn overfits_eight_samples_deterministically() {
    let a = overfit();
    let b = overfit();
    let last = a.history.last().unwrap().train_loss;
    assert!(a.history.iter().any(|r| r.train_loss < 0.01), "final train loss {last}");
    assert!(a.history[0].train_loss > a.history[1].train_loss);
    assert!(a.history[1].train_loss > a.history[2].train_loss);
    let losses = |o: &TrainOutcome| o.history.iter().map(|r| (r.train_loss, r.valid_loss)).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(a.params.store.tensors(), b.params.store.tensors());
    assert_eq!(a.steps, a.history.len());
}

#[test]
fn first_batch_loss_matches_hand_composed_loss() {
    let set = eight_samples();
    let params = TsbParams::init(&tiny_model(), 4).unwrap();
    let cfg = TrainConfig {
        max_epochs: 1,
        l2: 0.01,
        ..overfit_config()
    };
    let out = train_from(params.clone(), &set, &set, &cfg, &mut |_| {}).unwrap();

    let b = set.batch(&(0..8).collect::<Vec<_>>()).unwrap();
    let mut g = Graph::new();
    let p = params.store.bind(&mut g, false);
    let (e, d) = (g.constant(b.enc_in), g.constant(b.dec_in));
    let pred = forward_teacher_forced(&mut g, &params, &p, e, d).unwrap();
    let mse = g
        .value(pred)
        .data()
        .iter()
        .zip(b.target.data())
        .map(|(a, t)| (a - t) * (a - t))
        .sum::<f64>()
        / b.target.numel() as f64;
    let penalty: f64 = regularized_weights(&params, &p)
        .iter()
        .map(|&w| g.value(w).data().iter().map(|x| x * x).sum::<f64>())
        .sum();
    let want = mse + 0.5 * 0.01 * penalty;
    assert!((out.first_batch_loss - want).abs() < 1e-12, "{} vs {want}", out.first_batch_loss);
}

#[test]
fn early_stop_after_patience_frozen_epochs() {
    let set = eight_samples();
    let cfg = TrainConfig {
        // updates of this size vanish in f64, so the validation loss is frozen
        learning_rate: 1e-300,
        max_epochs: 20,
        patience: 6,
        ..overfit_config()
    };
    let out = train_from(TsbParams::init(&tiny_model(), 4).unwrap(), &set, &set, &cfg, &mut |_| {}).unwrap();
    assert_eq!(out.history.len(), 7);
    assert!(out.stopped_early);
    assert_eq!(out.best_epoch, 1);
    assert!(out.history.windows(2).all(|w| w[0].valid_loss == w[1].valid_loss));
}

#[test]
fn divergence_returns_last_finite_parameters() {
    let set = eight_samples();
    let cfg = TrainConfig {
        learning_rate: 1e200,
        clip_norm: None,
        optimizer: OptimizerKind::Sgd,
        max_epochs: 5,
        ..overfit_config()
    };
    let out = train_from(TsbParams::init(&tiny_model(), 4).unwrap(), &set, &set, &cfg, &mut |_| {}).unwrap();
    assert!(out.diverged.is_some());
    assert!(out.params.store.tensors().iter().all(Tensor::all_finite));
}

#[test]
fn normalized_training_split_has_unit_moments() {
    let scen = ScenarioConfig {
        slots: 1400,
        ..ScenarioConfig::default()
    };
    let series = generate_frame(&scen).unwrap().time_major();
    let data = prepare_data(&series, 96, 48, &SplitSpec::default(), 2, 3).unwrap();
    let z = zscore_normalize(&series, &data.norm);
    let f = series.shape()[1];
    let vals: Vec<f64> = data
        .plan
        .train
        .iter()
        .flat_map(|r| z.data()[r.start * f..r.end * f].to_vec())
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 1e-9);
    assert!((std - 1.0).abs() < 1e-9);
}

#[test]
fn windows_never_straddle_splits() {
    let (slots, t, m) = (1500, 96, 48);
    let spec = SplitSpec::default();
    for fold in 0..spec.folds {
        let plan = kfold_split(slots, t + m, &spec, fold).unwrap();
        let role_of = |s: usize| {
            let inside = |rs: &[std::ops::Range<usize>]| rs.iter().any(|r| r.contains(&s));
            match (inside(&plan.train), inside(&plan.valid), inside(&plan.test)) {
                (true, false, false) => 0,
                (false, true, false) => 1,
                (false, false, true) => 2,
                other => panic!("slot {s} has roles {other:?}"),
            }
        };
        let mut seen = HashSet::new();
        for (role, ranges) in [(0, &plan.train), (1, &plan.valid), (2, &plan.test)] {
            for s in window_starts(ranges, t + m, 1) {
                assert!((s..s + t + m).all(|x| role_of(x) == role));
                assert!(seen.insert(s), "window {s} in two splits");
            }
        }
    }
}

#[test]
fn history_records_every_epoch() {
    let set = eight_samples();
    let cfg = TrainConfig {
        max_epochs: 3,
        ..overfit_config()
    };
    let mut seen = Vec::new();
    let out = train_from(TsbParams::init(&tiny_model(), 4).unwrap(), &set, &set, &cfg, &mut |r| seen.push(r.epoch)).unwrap();
    assert_eq!(seen, vec![1, 2, 3]);
    let mut buf = Vec::new();
    write_history_csv(&mut buf, &out.history, None).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
}
