use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tsb_core::model::ModelConfig;
use tsb_core::specgen::{InterferenceMode, ScenarioConfig};
use tsb_core::training::{OptimizerKind, TrainConfig};

/// File names inside the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub report: PathBuf,
    pub errors: PathBuf,
    pub prediction: PathBuf,
    pub availability: PathBuf,
    pub ablation: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset: "dataset.csv".into(),
            checkpoint: "model.tsb".into(),
            history: "history.csv".into(),
            report: "report.json".into(),
            errors: "errors.csv".into(),
            prediction: "prediction.csv".into(),
            availability: "availability.csv".into(),
            ablation: "ablation.csv".into(),
        }
    }
}

impl Paths {
    /// Resolves every relative path against `dir`.
    pub fn under(&self, dir: &Path) -> Paths {
        let join = |p: &PathBuf| if p.is_absolute() { p.clone() } else { dir.join(p) };
        Paths {
            dataset: join(&self.dataset),
            checkpoint: join(&self.checkpoint),
            history: join(&self.history),
            report: join(&self.report),
            errors: join(&self.errors),
            prediction: join(&self.prediction),
            availability: join(&self.availability),
            ablation: join(&self.ablation),
        }
    }
}

/// Everything one pipeline run needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
    pub fold: usize,
    /// Master seed; the scenario and training seeds are derived from it.
    pub seed: u64,
}

/// Command-line values that override the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub fold: Option<usize>,
    pub mode: Option<String>,
    pub horizon: Option<usize>,
    pub input_len: Option<usize>,
    pub optimizer: Option<OptimizerKind>,
}

impl RunConfig {
    /// Parses JSON, reporting the path of the offending field on error.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("config field `{path}`: {}", e.into_inner())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(k) = o.fold {
            self.fold = k;
        }
        if let Some(m) = &o.mode {
            self.scenario.mode = InterferenceMode::from_name(m, self.scenario.channels)?;
        }
        if let Some(h) = o.horizon {
            self.model.horizon = h;
        }
        if let Some(t) = o.input_len {
            self.model.input_len = t;
        }
        if let Some(opt) = o.optimizer {
            self.train.optimizer = opt;
        }
        Ok(())
    }

    /// Derives sub-seeds and shared sizes from the top-level fields, then
    /// validates everything. Call before any RNG use.
    pub fn resolve(mut self) -> Result<Self> {
        self.scenario.seed = derive_seed(self.seed, "scenario");
        self.train.seed = derive_seed(self.seed, "train");
        self.model.channels = self.scenario.channels;
        self.scenario.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.fold >= self.train.split.folds {
            bail!("fold: must be below {}, got {}", self.train.split.folds, self.fold);
        }
        Ok(self)
    }

    /// SHA-256 over the canonical JSON of everything except `paths`, as the
    /// first 16 hex digits.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("paths");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Stable 64-bit sub-seed for a named consumer.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
