//! Synthetic spectrum scenarios: honest users, a scheduled jammer and a
//! noise floor, superposed in linear power.

mod dataset;

pub use dataset::{read_dataset, sidecar_path, write_dataset, DatasetSidecar};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::hard_decision;
use crate::tensor::Tensor;

/// Jammer schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InterferenceMode {
    /// Jams channel `⌊start + step·(t mod P)⌋` (wrapped into `[0, F)`).
    Sweep { start: f64, step: f64 },
    /// Always jams the listed channels.
    Fixed { channels: Vec<usize> },
    /// Jams one uniformly drawn channel per period.
    Hopping { seed: u64 },
    /// Always jams every `spacing`-th channel from `offset`.
    Comb { spacing: usize, offset: usize },
}

impl Default for InterferenceMode {
    fn default() -> Self {
        InterferenceMode::Sweep { start: 0.0, step: 1.0 }
    }
}

impl InterferenceMode {
    pub const NAMES: [&'static str; 4] = ["sweep", "fixed", "hopping", "comb"];

    /// Mode `name` with default parameters for `channels` channels.
    pub fn from_name(name: &str, channels: usize) -> Result<Self> {
        match name {
            "sweep" => Ok(InterferenceMode::default()),
            "fixed" => Ok(InterferenceMode::Fixed {
                channels: vec![channels / 2],
            }),
            "hopping" => Ok(InterferenceMode::Hopping { seed: 1 }),
            "comb" => Ok(InterferenceMode::Comb { spacing: 4, offset: 0 }),
            other => Err(Error::config(format!("mode: unknown value {other:?}, expected one of {:?}", Self::NAMES))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            InterferenceMode::Sweep { .. } => "sweep",
            InterferenceMode::Fixed { .. } => "fixed",
            InterferenceMode::Hopping { .. } => "hopping",
            InterferenceMode::Comb { .. } => "comb",
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        match self {
            InterferenceMode::Sweep { start, step } => {
                if !(start.is_finite() && step.is_finite()) || *start < 0.0 || *start >= channels as f64 {
                    return Err(Error::config(format!("mode.start: must lie in [0, {channels}), got {start}")));
                }
            }
            InterferenceMode::Fixed { channels: set } => {
                if let Some(c) = set.iter().find(|&&c| c >= channels) {
                    return Err(Error::config(format!("mode.channels: {c} is outside [0, {channels})")));
                }
            }
            InterferenceMode::Hopping { .. } => {}
            InterferenceMode::Comb { spacing, offset } => {
                if *spacing == 0 {
                    return Err(Error::config("mode.spacing: must be at least 1"));
                }
                if *offset >= channels {
                    return Err(Error::config(format!("mode.offset: {offset} is outside [0, {channels})")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub channels: usize,
    pub slots: usize,
    pub slot_seconds: f64,
    /// Interference period `P` in slots.
    pub period: usize,
    pub noise_floor_dbm: f64,
    /// Spread of the noise power around the floor, in dB.
    pub noise_std_db: f64,
    /// Fraction of channels that carry an honest user.
    pub hu_fraction: f64,
    /// Per-slot probability that an honest user switches on/off.
    pub hu_toggle_prob: f64,
    /// `[min, max]` honest-user power in dBm, drawn once per channel.
    pub hu_power_dbm: [f64; 2],
    /// `[min, max]` jammer power in dBm, drawn per jammed cell.
    pub mu_power_dbm: [f64; 2],
    /// Occupancy threshold λ in dBm.
    pub threshold_dbm: f64,
    pub mode: InterferenceMode,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            channels: 32,
            slots: 4000,
            slot_seconds: 0.1,
            period: 20,
            noise_floor_dbm: -90.0,
            noise_std_db: 1.0,
            hu_fraction: 0.25,
            hu_toggle_prob: 0.02,
            hu_power_dbm: [-48.0, -40.0],
            mu_power_dbm: [-45.0, -30.0],
            threshold_dbm: -50.0,
            mode: InterferenceMode::default(),
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("channels", self.channels), ("slots", self.slots), ("period", self.period)] {
            if v == 0 {
                return Err(Error::config(format!("{field}: must be at least 1")));
            }
        }
        if !(self.slot_seconds > 0.0) {
            return Err(Error::config("slot_seconds: must be positive"));
        }
        if !(self.noise_std_db >= 0.0) || !self.noise_floor_dbm.is_finite() {
            return Err(Error::config("noise_std_db: must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.hu_fraction) {
            return Err(Error::config("hu_fraction: must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.hu_toggle_prob) {
            return Err(Error::config("hu_toggle_prob: must lie in [0, 1]"));
        }
        for (field, [lo, hi]) in [("hu_power_dbm", self.hu_power_dbm), ("mu_power_dbm", self.mu_power_dbm)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::config(format!("{field}: need finite min <= max, got [{lo}, {hi}]")));
            }
        }
        if self.mu_power_dbm[0] <= self.threshold_dbm {
            return Err(Error::config(format!(
                "mu_power_dbm: minimum {} must exceed the threshold {}",
                self.mu_power_dbm[0], self.threshold_dbm
            )));
        }
        self.mode.validate(self.channels)
    }
}

/// Honest-user and jammer activity, each `[F, T]` in {0, 1}.
#[derive(Clone, Debug, PartialEq)]
pub struct Indicators {
    pub hu: Tensor,
    pub mu: Tensor,
}

/// Observed power `[F, T]` in dBm with its occupancy labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumFrame {
    pub config: ScenarioConfig,
    pub power: Tensor,
    pub occupancy: Tensor,
    /// Ground-truth activity; absent for frames read back from disk.
    pub indicators: Option<Indicators>,
}

impl SpectrumFrame {
    /// Builds a frame from `[F, T]` powers, labelling occupancy against the
    /// configured threshold.
    pub fn from_power(config: ScenarioConfig, power: Tensor) -> Result<Self> {
        if power.shape() != [config.channels, config.slots] {
            return Err(Error::dim("spectrum frame", power.shape(), &[config.channels, config.slots]));
        }
        if !power.all_finite() {
            return Err(Error::Numeric {
                op: "spectrum frame",
                detail: "power contains non-finite values".into(),
            });
        }
        let occupancy = hard_decision(&power, config.threshold_dbm);
        Ok(SpectrumFrame {
            config,
            power,
            occupancy,
            indicators: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.power.shape()[0]
    }

    pub fn slots(&self) -> usize {
        self.power.shape()[1]
    }

    /// Time-major copy `[T, F]`, the layout the model consumes.
    pub fn time_major(&self) -> Tensor {
        self.power.transpose().expect("frame power is rank 2")
    }
}

/// `10·log10(Σ 10^(x/10))`: superposition of powers given in dBm.
pub fn combine_powers_dbm(components: &[f64]) -> Result<f64> {
    match components {
        [] => Err(Error::contract("combine_powers_dbm needs at least one component")),
        [x] => Ok(*x),
        _ => {
            let mw: f64 = components.iter().map(|x| 10f64.powf(x / 10.0)).sum();
            Ok(10.0 * mw.log10())
        }
    }
}

/// Jammer activity `[F, T]` for `mode` with period `period`.
pub fn interference_schedule(mode: &InterferenceMode, channels: usize, slots: usize, period: usize) -> Result<Tensor> {
    mode.validate(channels)?;
    if period == 0 {
        return Err(Error::config("period: must be at least 1"));
    }
    let mut mask = Tensor::zeros(&[channels, slots]);
    let m = mask.data_mut();
    match mode {
        InterferenceMode::Sweep { start, step } => {
            for t in 0..slots {
                let c = (start + step * (t % period) as f64).floor() as i64;
                m[c.rem_euclid(channels as i64) as usize * slots + t] = 1.0;
            }
        }
        InterferenceMode::Fixed { channels: set } => {
            for &c in set {
                m[c * slots..(c + 1) * slots].fill(1.0);
            }
        }
        InterferenceMode::Hopping { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            for p0 in (0..slots).step_by(period) {
                let c = rng.random_range(0..channels);
                for t in p0..(p0 + period).min(slots) {
                    m[c * slots + t] = 1.0;
                }
            }
        }
        InterferenceMode::Comb { spacing, offset } => {
            for c in (*offset..channels).step_by(*spacing) {
                m[c * slots..(c + 1) * slots].fill(1.0);
            }
        }
    }
    Ok(mask)
}

fn channel_rng(seed: u64, channel: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(channel as u64 + 1);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Generates one channel's row of `(power, hu)`; depends only on the seed,
/// the channel index and the shared assignment of honest users.
fn generate_channel(cfg: &ScenarioConfig, channel: usize, has_hu: bool, mu_row: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut rng = channel_rng(cfg.seed, channel);
    let noise = Normal::new(cfg.noise_floor_dbm, cfg.noise_std_db).expect("validated noise spread");
    let hu_power = uniform(&mut rng, cfg.hu_power_dbm);
    let mut hu_on = has_hu && rng.random_bool(0.5);
    let mut power = Vec::with_capacity(cfg.slots);
    let mut hu = Vec::with_capacity(cfg.slots);
    for &jam in mu_row {
        let n = noise.sample(&mut rng);
        let toggle = rng.random_bool(cfg.hu_toggle_prob);
        let mu_power = uniform(&mut rng, cfg.mu_power_dbm);
        if has_hu && toggle {
            hu_on = !hu_on;
        }
        let mut parts = vec![n];
        if hu_on {
            parts.push(hu_power);
        }
        if jam != 0.0 {
            parts.push(mu_power);
        }
        power.push(combine_powers_dbm(&parts).expect("non-empty"));
        hu.push(if hu_on { 1.0 } else { 0.0 });
    }
    (power, hu)
}

/// Draws a spectrum frame. Each channel uses its own RNG stream derived from
/// `(seed, channel)`, so the result does not depend on generation order.
pub fn generate_frame(cfg: &ScenarioConfig) -> Result<SpectrumFrame> {
    cfg.validate()?;
    let (f, t) = (cfg.channels, cfg.slots);
    let mu = interference_schedule(&cfg.mode, f, t, cfg.period)?;
    let mut assign_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hu_count = (cfg.hu_fraction * f as f64).round() as usize;
    let hu_channels = rand::seq::index::sample(&mut assign_rng, f, hu_count).into_vec();
    let mut power = Vec::with_capacity(f * t);
    let mut hu = Vec::with_capacity(f * t);
    for c in 0..f {
        let (p, h) = generate_channel(cfg, c, hu_channels.contains(&c), &mu.data()[c * t..(c + 1) * t]);
        power.extend(p);
        hu.extend(h);
    }
    let mut frame = SpectrumFrame::from_power(cfg.clone(), Tensor::from_parts(vec![f, t], power))?;
    frame.indicators = Some(Indicators {
        hu: Tensor::from_parts(vec![f, t], hu),
        mu,
    });
    Ok(frame)
}
