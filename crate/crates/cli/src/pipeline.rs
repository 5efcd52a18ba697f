use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tsb_core::metrics::{persistence_forecast, write_error_csv, Ar1Model, MetricsReport};
use tsb_core::model::{hard_decision, predict_autoregressive, Checkpoint, TsbParams};
use tsb_core::specgen::{generate_frame, read_dataset, write_dataset, SpectrumFrame};
use tsb_core::training::{
    denormalize, prepare_data, train_with_observer, write_history_csv, zscore_normalize, EpochRecord, NormStats,
    PreparedData, TrainOutcome, WindowSet,
};
use tsb_core::Tensor;

use crate::config::{Paths, RunConfig};

/// Windows per forward pass when forecasting.
const PREDICT_BATCH: usize = 32;

/// Scores of the network and both baselines on the test windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub fold: usize,
    pub model: MetricsReport,
    pub persistence: MetricsReport,
    pub ar1: MetricsReport,
}

pub fn hash_comment(hash: &str) -> String {
    format!("config_hash={hash}")
}

pub fn load_dataset(path: &Path) -> Result<SpectrumFrame> {
    if !path.exists() {
        bail!("dataset not found: {} (run `generate` first)", path.display());
    }
    let (frame, _) = read_dataset(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(frame)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        bail!("checkpoint not found: {} (run `train` first)", path.display());
    }
    Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))
}

pub fn prepare(cfg: &RunConfig, series_dbm: &Tensor) -> Result<PreparedData> {
    Ok(prepare_data(
        series_dbm,
        cfg.model.input_len,
        cfg.model.horizon,
        &cfg.train.split,
        cfg.fold,
        cfg.train.window_stride,
    )?)
}

pub fn train_on(
    cfg: &RunConfig,
    data: &PreparedData,
    observer: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    Ok(train_with_observer(data, &cfg.model, &cfg.train, observer)?)
}

/// Autoregressive forecasts for every window of `set`, in dBm, `[N, M, F]`.
pub fn forecast_set(params: &TsbParams, set: &WindowSet, norm: &NormStats) -> Result<(Tensor, Tensor, Tensor)> {
    let (mut enc, mut pred, mut target) = (Vec::new(), Vec::new(), Vec::new());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(PREDICT_BATCH) {
        let b = set.batch(chunk)?;
        let p = predict_autoregressive(params, &b.enc_in)?;
        enc.extend_from_slice(denormalize(&b.enc_in, norm).data());
        pred.extend_from_slice(denormalize(&p, norm).data());
        target.extend_from_slice(denormalize(&b.target, norm).data());
    }
    let (t, m, f) = (params.config.input_len, params.config.horizon, set.channels());
    let n = set.len();
    Ok((
        Tensor::new(vec![n, t, f], enc)?,
        Tensor::new(vec![n, m, f], pred)?,
        Tensor::new(vec![n, m, f], target)?,
    ))
}

/// Scores `params` and both baselines on the test windows of `data`.
pub fn evaluate_on(
    params: &TsbParams,
    data: &PreparedData,
    series_dbm: &Tensor,
    threshold_dbm: f64,
) -> Result<(MetricsReport, MetricsReport, MetricsReport, Tensor, Tensor)> {
    if data.test.is_empty() {
        bail!("test split has no complete windows; increase scenario.slots");
    }
    let m = params.config.horizon;
    let (enc, pred, target) = forecast_set(params, &data.test, &data.norm)?;
    let model = MetricsReport::compute(&pred, &target, &data.norm, threshold_dbm)?;
    let persistence = MetricsReport::compute(&persistence_forecast(&enc, m)?, &target, &data.norm, threshold_dbm)?;
    let ar1 = Ar1Model::fit(series_dbm, &data.plan.train)?;
    let ar1 = MetricsReport::compute(&ar1.forecast(&enc, m)?, &target, &data.norm, threshold_dbm)?;
    Ok((model, persistence, ar1, pred, target))
}

pub fn generate(cfg: &RunConfig, paths: &Paths) -> Result<SpectrumFrame> {
    let frame = generate_frame(&cfg.scenario)?;
    write_dataset(&paths.dataset, &frame, Some(&cfg.hash()))?;
    Ok(frame)
}

pub fn train(cfg: &RunConfig, paths: &Paths, verbose: bool) -> Result<TrainOutcome> {
    let frame = load_dataset(&paths.dataset)?;
    check_channels(cfg, &frame)?;
    let series = frame.time_major();
    let data = prepare(cfg, &series)?;
    let outcome = train_on(cfg, &data, |r| {
        if verbose {
            eprintln!(
                "epoch {:>3}  train {:.6}  valid {:.6}  {:.1}s",
                r.epoch, r.train_loss, r.valid_loss, r.wall_seconds
            );
        }
    })?;
    let hash = cfg.hash();
    let mut metadata = BTreeMap::new();
    metadata.insert("config_hash".to_string(), hash.clone());
    metadata.insert("fold".to_string(), cfg.fold.to_string());
    metadata.insert("best_epoch".to_string(), outcome.best_epoch.to_string());
    metadata.insert("steps".to_string(), outcome.steps.to_string());
    Checkpoint {
        params: outcome.params.clone(),
        norm: data.norm,
        metadata,
    }
    .save(&paths.checkpoint)?;
    let file = fs::File::create(&paths.history)?;
    write_history_csv(BufWriter::new(file), &outcome.history, Some(&hash_comment(&hash)))?;
    if let Some(err) = &outcome.diverged {
        bail!("training diverged: {err}; last finite parameters saved to {}", paths.checkpoint.display());
    }
    Ok(outcome)
}

pub fn evaluate(cfg: &RunConfig, paths: &Paths) -> Result<EvalReport> {
    let ckpt = load_checkpoint(&paths.checkpoint)?;
    check_model(cfg, &ckpt)?;
    let frame = load_dataset(&paths.dataset)?;
    check_channels(cfg, &frame)?;
    let series = frame.time_major();
    let mut data = prepare(cfg, &series)?;
    if data.norm != ckpt.norm {
        // a checkpoint from another fold or dataset; score it on its own scale
        data.norm = ckpt.norm;
        data.test = WindowSet::new(
            zscore_normalize(&series, &ckpt.norm),
            data.test.starts().to_vec(),
            cfg.model.input_len,
            cfg.model.horizon,
        )?;
    }
    let (model, persistence, ar1, pred, target) =
        evaluate_on(&ckpt.params, &data, &series, cfg.scenario.threshold_dbm)?;
    let hash = cfg.hash();
    let tag = |mut r: MetricsReport| {
        r.config_hash = Some(hash.clone());
        r
    };
    let report = EvalReport {
        config_hash: hash.clone(),
        fold: cfg.fold,
        model: tag(model),
        persistence: tag(persistence),
        ar1: tag(ar1),
    };
    fs::write(&paths.report, serde_json::to_string_pretty(&report)? + "\n")?;
    let file = fs::File::create(&paths.errors)?;
    write_error_csv(BufWriter::new(file), &pred, &target, &data.norm, Some(&hash_comment(&hash)))?;
    Ok(report)
}

/// Forecasts the `M` slots following the last `T` rows of the dataset.
/// Returns the dBm forecast `[M, F]`.
pub fn predict(cfg: &RunConfig, paths: &Paths) -> Result<Tensor> {
    let ckpt = load_checkpoint(&paths.checkpoint)?;
    check_model(cfg, &ckpt)?;
    let frame = load_dataset(&paths.dataset)?;
    check_channels(cfg, &frame)?;
    let series = frame.time_major();
    let (slots, f) = (series.shape()[0], series.shape()[1]);
    let t = cfg.model.input_len;
    if slots < t {
        bail!("dataset has {slots} slots, fewer than input_len {t}");
    }
    let tail = Tensor::new(vec![t, f], series.data()[(slots - t) * f..].to_vec())?;
    let z = predict_autoregressive(&ckpt.params, &zscore_normalize(&tail, &ckpt.norm))?;
    let pred = denormalize(&z, &ckpt.norm);
    let hash = cfg.hash();
    fs::write(&paths.prediction, matrix_csv(&pred, &hash, |v| format!("{v:.6}")))?;
    let avail = hard_decision(&pred, cfg.scenario.threshold_dbm);
    fs::write(&paths.availability, matrix_csv(&avail, &hash, |v| format!("{}", v as u8)))?;
    Ok(pred)
}

/// `[rows, F]` as CSV with `ch0..` columns.
fn matrix_csv(t: &Tensor, hash: &str, cell: impl Fn(f64) -> String) -> String {
    let f = t.shape()[1];
    let mut s = format!("# {}\n", hash_comment(hash));
    let header: Vec<String> = (0..f).map(|c| format!("ch{c}")).collect();
    s.push_str(&header.join(","));
    s.push('\n');
    for row in t.data().chunks(f) {
        let cells: Vec<String> = row.iter().map(|&v| cell(v)).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

fn check_channels(cfg: &RunConfig, frame: &SpectrumFrame) -> Result<()> {
    if frame.channels() != cfg.model.channels {
        bail!(
            "dataset has {} channels but the config expects {}",
            frame.channels(),
            cfg.model.channels
        );
    }
    Ok(())
}

fn check_model(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<()> {
    let c = &ckpt.params.config;
    if c.input_len != cfg.model.input_len || c.horizon != cfg.model.horizon || c.channels != cfg.model.channels {
        bail!(
            "checkpoint was trained for input_len={} horizon={} channels={}, config asks for {}/{}/{}",
            c.input_len,
            c.horizon,
            c.channels,
            cfg.model.input_len,
            cfg.model.horizon,
            cfg.model.channels
        );
    }
    Ok(())
}
