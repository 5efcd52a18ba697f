//! Loss, optimizers, chronological splitting, normalization and the
//! mini-batch training loop with early stopping.

mod data;
mod loss;
mod norm;
mod optim;
mod split;

pub use data::{prepare_data, Batch, PreparedData, WindowSet};
pub use loss::{mse_l2_loss, regularized_weights};
pub use norm::{denormalize, zscore_normalize, NormStats, MIN_STD};
pub use optim::{
    clip_global_norm, Optimizer, OptimizerKind, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, SGDM_MOMENTUM,
};
pub use split::{kfold_split, partition, window_starts, SplitPlan, SplitSpec};

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_teacher_forced, ModelConfig, TsbParams};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// L2 coefficient η on weight matrices.
    pub l2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Step between consecutive window starts.
    pub window_stride: usize,
    pub split: SplitSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.001,
            l2: 1e-6,
            batch_size: 32,
            max_epochs: 20,
            patience: 6,
            seed: 0,
            clip_norm: Some(5.0),
            window_stride: 3,
            split: SplitSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate: must be positive, got {}", self.learning_rate)));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::config(format!("l2: must be non-negative, got {}", self.l2)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size: must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs: must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience: must be at least 1"));
        }
        if self.window_stride == 0 {
            return Err(Error::config("window_stride: must be at least 1"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config(format!("clip_norm: must be positive, got {c}")));
            }
        }
        self.split.validate()
    }
}

/// Patience counter over a strictly-decreasing validation loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            bad_epochs: 0,
        }
    }

    /// Records one epoch; returns `true` once `patience` consecutive epochs
    /// have failed to improve on the best loss.
    pub fn update(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        self.bad_epochs >= self.patience
    }

    pub fn improved_at(&self, epoch: usize) -> bool {
        self.best_epoch == Some(epoch)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }

    pub fn bad_epochs(&self) -> usize {
        self.bad_epochs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub params: TsbParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Optimizer steps taken (`S_train`).
    pub steps: usize,
    /// Loss of the very first mini-batch, before any update.
    pub first_batch_loss: f64,
    pub stopped_early: bool,
    /// Set when a non-finite loss or gradient aborted training; `params` then
    /// holds the last finite best.
    pub diverged: Option<Error>,
}

/// Mean teacher-forced MSE over `set`, without the L2 term.
pub fn evaluate_loss(params: &TsbParams, set: &WindowSet, batch_size: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::contract("evaluation set is empty"));
    }
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = set.batch(chunk)?;
        let mut g = Graph::new();
        let p = params.store.bind(&mut g, false);
        let enc = g.constant(b.enc_in);
        let dec = g.constant(b.dec_in);
        let pred = forward_teacher_forced(&mut g, params, &p, enc, dec)?;
        let sq: f64 = g
            .value(pred)
            .data()
            .iter()
            .zip(b.target.data())
            .map(|(a, t)| (a - t) * (a - t))
            .sum();
        total += sq;
    }
    let cells = set.len() * params.config.horizon * params.config.channels;
    Ok(total / cells as f64)
}

struct StepResult {
    loss: f64,
    grads: Vec<Tensor>,
}

fn train_step(params: &TsbParams, batch: Batch, l2: f64) -> Result<StepResult> {
    let mut g = Graph::new();
    let p = params.store.bind(&mut g, true);
    let enc = g.constant(batch.enc_in);
    let dec = g.constant(batch.dec_in);
    let target = g.constant(batch.target);
    let pred = forward_teacher_forced(&mut g, params, &p, enc, dec)?;
    let weights = regularized_weights(params, &p);
    let loss = mse_l2_loss(&mut g, pred, target, &weights, l2)?;
    let value = g.value(loss).item()?;
    g.backward(loss)?;
    Ok(StepResult {
        loss: value,
        grads: p.grads(&g),
    })
}

/// Trains a fresh model on `data.train`, early-stopping on `data.valid`.
pub fn train(data: &PreparedData, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(data, model, cfg, |_| {})
}

/// As [`train`], calling `observe` after every epoch.
pub fn train_with_observer(
    data: &PreparedData,
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let params = TsbParams::init(model, cfg.seed)?;
    train_from(params, &data.train, &data.valid, cfg, &mut observe)
}

/// Training loop starting from given parameters.
pub fn train_from(
    mut params: TsbParams,
    train_set: &WindowSet,
    valid_set: &WindowSet,
    cfg: &TrainConfig,
    observe: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::config("training and validation sets must each hold at least one window"));
    }
    if train_set.channels() != params.config.channels {
        return Err(Error::config(format!(
            "channels: model expects {}, data has {}",
            params.config.channels,
            train_set.channels()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, params.store.tensors());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = params.clone();
    let mut history = Vec::new();
    let mut steps = 0;
    let mut first_batch_loss = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let start = Instant::now();
    let mut stopped_early = false;
    let mut diverged = None;

    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let step = match train_step(&params, train_set.batch(chunk)?, cfg.l2) {
                Ok(s) => s,
                Err(e @ Error::Numeric { .. }) => {
                    diverged = Some(Error::Diverged {
                        epoch,
                        detail: e.to_string(),
                    });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let mut grads = step.grads;
            let finite = step.loss.is_finite() && grads.iter().all(Tensor::all_finite);
            if !finite {
                diverged = Some(Error::Diverged {
                    epoch,
                    detail: format!("non-finite loss {} at step {}", step.loss, steps + 1),
                });
                break 'epochs;
            }
            first_batch_loss.get_or_insert(step.loss);
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            opt.step(params.store.tensors_mut(), &grads)?;
            steps += 1;
            loss_sum += step.loss;
            batches += 1;
        }
        let valid_loss = match evaluate_loss(&params, valid_set, cfg.batch_size) {
            Err(Error::Numeric { .. }) => f64::NAN,
            other => other?,
        };
        if !valid_loss.is_finite() {
            diverged = Some(Error::Diverged {
                epoch,
                detail: format!("non-finite validation loss {valid_loss}"),
            });
            break;
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            valid_loss,
            lr: opt.learning_rate,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        observe(&record);
        history.push(record);
        let stop = stopper.update(epoch, valid_loss);
        if stopper.improved_at(epoch) {
            best = params.clone();
        }
        if stop {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    Ok(TrainOutcome {
        params: best,
        best_epoch: stopper.best().map_or(0, |(e, _)| e),
        history,
        steps,
        first_batch_loss: first_batch_loss.unwrap_or(f64::NAN),
        stopped_early,
        diverged,
    })
}

/// Writes the per-epoch history as CSV, optionally preceded by a `# ` comment line.
pub fn write_history_csv<W: Write>(out: W, history: &[EpochRecord], comment: Option<&str>) -> Result<()> {
    let mut out = out;
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["epoch", "train_loss", "valid_loss", "lr", "wall_seconds"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            format!("{:.6}", r.train_loss),
            format!("{:.6}", r.valid_loss),
            format!("{:.6}", r.lr),
            format!("{:.6}", r.wall_seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_counts_consecutive_failures() {
        let mut s = EarlyStopping::new(3);
        assert!(!s.update(1, 1.0));
        assert!(!s.update(2, 1.0));
        assert!(!s.update(3, 0.5));
        assert_eq!(s.bad_epochs(), 0);
        assert!(!s.update(4, 0.6));
        assert!(!s.update(5, 0.5));
        assert!(s.update(6, 0.7));
        assert_eq!(s.best(), Some((3, 0.5)));
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("learning_rate"));
        let bad = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("patience"));
    }

    #[test]
    fn history_csv_layout() {
        let rec = EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            valid_loss: 0.25,
            lr: 0.001,
            wall_seconds: 1.5,
        };
        let mut buf = Vec::new();
        write_history_csv(&mut buf, &[rec], Some("config_hash=ab")).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "# config_hash=ab\nepoch,train_loss,valid_loss,lr,wall_seconds\n1,0.500000,0.250000,0.001000,1.500000\n"
        );
    }
}
