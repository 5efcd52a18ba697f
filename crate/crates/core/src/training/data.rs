use super::norm::{zscore_normalize, NormStats};
use super::split::{kfold_split, window_starts, SplitPlan, SplitSpec};
use crate::error::{Error, Result};
use crate::model::decoder_input;
use crate::tensor::Tensor;

/// One mini-batch of teacher-forcing inputs.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, T, F]`
    pub enc_in: Tensor,
    /// `[B, M, F]`: last encoder row, then targets `1..M−1`.
    pub dec_in: Tensor,
    /// `[B, M, F]`
    pub target: Tensor,
}

/// Sliding (input, target) windows over a time-major `[slots, F]` series.
#[derive(Clone, Debug)]
pub struct WindowSet {
    series: Tensor,
    starts: Vec<usize>,
    input_len: usize,
    horizon: usize,
}

impl WindowSet {
    pub fn new(series: Tensor, starts: Vec<usize>, input_len: usize, horizon: usize) -> Result<Self> {
        if series.rank() != 2 {
            return Err(Error::dim("window set", series.shape(), &[2]));
        }
        let slots = series.shape()[0];
        if let Some(&bad) = starts.iter().find(|&&s| s + input_len + horizon > slots) {
            return Err(Error::contract(format!("window at {bad} runs past {slots} slots")));
        }
        Ok(WindowSet {
            series,
            starts,
            input_len,
            horizon,
        })
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn channels(&self) -> usize {
        self.series.shape()[1]
    }

    fn rows(&self, from: usize, count: usize) -> &[f64] {
        let f = self.channels();
        &self.series.data()[from * f..(from + count) * f]
    }

    /// Input `[T, F]` and target `[M, F]` of window `i`.
    pub fn sample(&self, i: usize) -> (Tensor, Tensor) {
        let (s, f) = (self.starts[i], self.channels());
        (
            Tensor::from_parts(vec![self.input_len, f], self.rows(s, self.input_len).to_vec()),
            Tensor::from_parts(vec![self.horizon, f], self.rows(s + self.input_len, self.horizon).to_vec()),
        )
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let f = self.channels();
        let b = indices.len();
        let mut enc = Vec::with_capacity(b * self.input_len * f);
        let mut tgt = Vec::with_capacity(b * self.horizon * f);
        for &i in indices {
            let s = self.starts[i];
            enc.extend_from_slice(self.rows(s, self.input_len));
            tgt.extend_from_slice(self.rows(s + self.input_len, self.horizon));
        }
        let enc_in = Tensor::from_parts(vec![b, self.input_len, f], enc);
        let target = Tensor::from_parts(vec![b, self.horizon, f], tgt);
        let dec_in = decoder_input(&enc_in, &target)?;
        Ok(Batch { enc_in, dec_in, target })
    }
}

/// Normalized train/valid/test windows for one fold.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub norm: NormStats,
    pub plan: SplitPlan,
    pub train: WindowSet,
    pub valid: WindowSet,
    pub test: WindowSet,
}

/// Splits a time-major dBm series `[slots, F]`, fits normalization on the
/// training blocks only, and builds the three window sets.
pub fn prepare_data(
    series_dbm: &Tensor,
    input_len: usize,
    horizon: usize,
    spec: &SplitSpec,
    fold: usize,
    stride: usize,
) -> Result<PreparedData> {
    if series_dbm.rank() != 2 {
        return Err(Error::dim("prepare_data", series_dbm.shape(), &[2]));
    }
    let (slots, f) = (series_dbm.shape()[0], series_dbm.shape()[1]);
    let window = input_len + horizon;
    let plan = kfold_split(slots, window, spec, fold)?;
    let norm = NormStats::fit(
        plan.train
            .iter()
            .flat_map(|r| series_dbm.data()[r.start * f..r.end * f].iter()),
    );
    let normalized = zscore_normalize(series_dbm, &norm);
    let set = |ranges: &[std::ops::Range<usize>]| {
        WindowSet::new(normalized.clone(), window_starts(ranges, window, stride), input_len, horizon)
    };
    Ok(PreparedData {
        norm,
        train: set(&plan.train)?,
        valid: set(&plan.valid)?,
        test: set(&plan.test)?,
        plan,
    })
}
