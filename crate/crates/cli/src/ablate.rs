use std::fmt::Write as _;
use std::sync::Mutex;

use anyhow::Result;
use tsb_core::specgen::generate_frame;

use crate::config::RunConfig;
use crate::pipeline::{evaluate_on, hash_comment, prepare, train_on};

/// One axis of the one-factor grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Factor {
    /// Encoder and decoder depth together.
    Layers(usize),
    Heads(usize),
    BiLstmLayers(usize),
    LearningRate(f64),
}

impl Factor {
    pub fn name(&self) -> &'static str {
        match self {
            Factor::Layers(_) => "layers",
            Factor::Heads(_) => "heads",
            Factor::BiLstmLayers(_) => "bilstm_layers",
            Factor::LearningRate(_) => "learning_rate",
        }
    }

    pub fn value(&self) -> String {
        match *self {
            Factor::Layers(v) | Factor::Heads(v) | Factor::BiLstmLayers(v) => v.to_string(),
            Factor::LearningRate(v) => format!("{v}"),
        }
    }

    /// `base` with this factor changed. Changing the head count rescales
    /// `d_model` so the per-head width stays fixed.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match *self {
            Factor::Layers(n) => {
                cfg.model.enc_layers = n;
                cfg.model.dec_layers = n;
            }
            Factor::Heads(h) => {
                let dk = base.model.d_model / base.model.heads;
                cfg.model.heads = h;
                cfg.model.d_model = dk * h;
            }
            Factor::BiLstmLayers(l) => cfg.model.bilstm_layers = l,
            Factor::LearningRate(a) => cfg.train.learning_rate = a,
        }
        cfg
    }
}

pub fn grid() -> Vec<Factor> {
    let mut cells = Vec::with_capacity(12);
    cells.extend([2, 3, 4].map(Factor::Layers));
    cells.extend([8, 10, 12].map(Factor::Heads));
    cells.extend([1, 2, 3].map(Factor::BiLstmLayers));
    cells.extend([0.01, 0.001, 0.0001].map(Factor::LearningRate));
    cells
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub factor: Factor,
    pub d_model: usize,
    pub epochs: usize,
    pub rmse_db: f64,
    pub availability_accuracy: f64,
    /// Training error, if the cell failed.
    pub error: Option<String>,
}

/// Worker count: `TSB_THREADS` if set, otherwise the available cores.
pub fn worker_count(cells: usize) -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cap = std::env::var("TSB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(avail);
    cap.min(cells).max(1)
}

fn run_cell(base: &RunConfig, factor: Factor) -> CellResult {
    let cfg = factor.apply(base);
    let fail = |e: anyhow::Error| CellResult {
        factor,
        d_model: cfg.model.d_model,
        epochs: 0,
        rmse_db: f64::NAN,
        availability_accuracy: f64::NAN,
        error: Some(format!("{e:#}")),
    };
    let attempt = || -> Result<CellResult> {
        let cfg = cfg.clone().resolve()?;
        let series = generate_frame(&cfg.scenario)?.time_major();
        let data = prepare(&cfg, &series)?;
        let outcome = train_on(&cfg, &data, |_| {})?;
        let (model, ..) = evaluate_on(&outcome.params, &data, &series, cfg.scenario.threshold_dbm)?;
        Ok(CellResult {
            factor,
            d_model: cfg.model.d_model,
            epochs: outcome.history.len(),
            rmse_db: model.rmse_db,
            availability_accuracy: model.availability_accuracy,
            error: outcome.diverged.map(|e| e.to_string()),
        })
    };
    attempt().unwrap_or_else(fail)
}

/// Runs every cell of the grid on `threads` workers; results keep grid order.
pub fn run_grid(base: &RunConfig, threads: usize) -> Vec<CellResult> {
    let cells = grid();
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|s| {
        for _ in 0..threads.max(1) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("grid counter");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(&factor) = cells.get(i) else { break };
                let r = run_cell(base, factor);
                results.lock().expect("grid results")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("grid results")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

pub fn ablation_csv(results: &[CellResult], hash: &str) -> String {
    let mut s = format!("# {}\n", hash_comment(hash));
    s.push_str("factor,value,d_model,epochs,rmse_db,availability_accuracy,status\n");
    for r in results {
        let status = if r.error.is_some() { "failed" } else { "ok" };
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{}",
            r.factor.name(),
            r.factor.value(),
            r.d_model,
            r.epochs,
            r.rmse_db,
            r.availability_accuracy,
            status
        );
    }
    s
}
