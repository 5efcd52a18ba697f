//! Command-line pipeline for the TSB spectrum forecaster.
//!
//! ```text
//! tsb generate --out run/
//! tsb train --out run/
//! tsb evaluate --out run/
//! tsb predict --out run/
//! tsb ablate --out run/
//! ```

pub mod ablate;
pub mod config;
pub mod pipeline;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Parser, Subcommand, ValueEnum};
use tsb_core::training::OptimizerKind;

pub use config::{Overrides, Paths, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "tsb", version, about = "Spectrum forecasting with a Bi-LSTM Transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub fold: Option<usize>,
    #[arg(long, global = true, value_parser = ["sweep", "fixed", "hopping", "comb"])]
    pub mode: Option<String>,
    #[arg(long, global = true, value_parser = PossibleValuesParser::new(["48", "96"]).map(|s| s.parse::<usize>().unwrap()))]
    pub horizon: Option<usize>,
    #[arg(long = "input-len", global = true, value_parser = PossibleValuesParser::new(["96", "128"]).map(|s| s.parse::<usize>().unwrap()))]
    pub input_len: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub optimizer: Option<OptArg>,
    /// Output directory for every artifact.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Write a synthetic dataset CSV and its JSON sidecar.
    Generate,
    /// Train on the dataset; writes a checkpoint and the epoch history.
    Train,
    /// Score the checkpoint and the baselines on the test fold.
    Evaluate,
    /// Forecast the slots after the end of the dataset.
    Predict,
    /// One-factor ablation grid.
    Ablate,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum OptArg {
    Adam,
    Sgdm,
    Sgd,
}

impl From<OptArg> for OptimizerKind {
    fn from(o: OptArg) -> Self {
        match o {
            OptArg::Adam => OptimizerKind::Adam,
            OptArg::Sgdm => OptimizerKind::Sgdm,
            OptArg::Sgd => OptimizerKind::Sgd,
        }
    }
}

/// Bad configuration or arguments; maps to exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: anyhow::Error) -> anyhow::Error {
    UsageError(format!("{e:#}")).into()
}

impl Cli {
    /// The effective, validated configuration.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).map_err(usage)?,
            None => RunConfig::default(),
        };
        let o = Overrides {
            seed: self.seed,
            fold: self.fold,
            mode: self.mode.clone(),
            horizon: self.horizon,
            input_len: self.input_len,
            optimizer: self.optimizer.map(Into::into),
        };
        cfg.apply(&o).map_err(usage)?;
        cfg.resolve().map_err(usage)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.run_config()?;
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let paths = cfg.paths.under(&cli.out);
    match cli.command {
        Command::Generate => {
            let frame = pipeline::generate(&cfg, &paths)?;
            eprintln!(
                "wrote {} ({} slots x {} channels)",
                paths.dataset.display(),
                frame.slots(),
                frame.channels()
            );
        }
        Command::Train => {
            let out = pipeline::train(&cfg, &paths, true)?;
            eprintln!(
                "best epoch {} of {}; wrote {}",
                out.best_epoch,
                out.history.len(),
                paths.checkpoint.display()
            );
        }
        Command::Evaluate => {
            let r = pipeline::evaluate(&cfg, &paths)?;
            eprintln!(
                "rmse {:.3} dB (persistence {:.3}, ar1 {:.3}); availability {:.4}",
                r.model.rmse_db, r.persistence.rmse_db, r.ar1.rmse_db, r.model.availability_accuracy
            );
        }
        Command::Predict => {
            pipeline::predict(&cfg, &paths)?;
            eprintln!("wrote {}", paths.prediction.display());
        }
        Command::Ablate => {
            let threads = ablate::worker_count(ablate::grid().len());
            let results = ablate::run_grid(&cfg, threads);
            std::fs::write(&paths.ablation, ablate::ablation_csv(&results, &cfg.hash()))?;
            eprintln!("wrote {}", paths.ablation.display());
            if let Some(r) = results.iter().find(|r| r.error.is_some()) {
                anyhow::bail!(
                    "ablation cell {}={} failed: {}",
                    r.factor.name(),
                    r.factor.value(),
                    r.error.as_deref().unwrap_or_default()
                );
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs, and returns the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            let is_usage = e.downcast_ref::<UsageError>().is_some()
                || matches!(e.downcast_ref::<tsb_core::Error>(), Some(tsb_core::Error::Config(_)));
            if is_usage {
                2
            } else {
                1
            }
        }
    }
}
