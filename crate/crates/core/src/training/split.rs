//! Leakage-free chronological splitting.
//!
//! The time axis is cut into `train + valid + test` contiguous blocks of
//! near-equal size. Fold `k` rotates the role assignment by `k` blocks, so
//! every fold keeps the train:valid:test block ratio and successive folds test
//! on different blocks. Sample windows are confined to a single block.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_parts: usize,
    pub valid_parts: usize,
    pub test_parts: usize,
    /// Number of rotations (K).
    pub folds: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_parts: 5,
            valid_parts: 1,
            test_parts: 1,
            folds: 5,
        }
    }
}

impl SplitSpec {
    pub fn total_parts(&self) -> usize {
        self.train_parts + self.valid_parts + self.test_parts
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_parts == 0 || self.valid_parts == 0 || self.test_parts == 0 {
            return Err(Error::config("split: every role needs at least one part"));
        }
        if self.folds == 0 || self.folds > self.total_parts() {
            return Err(Error::config(format!(
                "split.folds: must be in 1..={}, got {}",
                self.total_parts(),
                self.folds
            )));
        }
        Ok(())
    }
}

/// Role of each block for one fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    /// All blocks in time order.
    pub parts: Vec<Range<usize>>,
    pub train: Vec<Range<usize>>,
    pub valid: Vec<Range<usize>>,
    pub test: Vec<Range<usize>>,
}

/// Cuts `0..total` into `parts` contiguous ranges whose sizes differ by at most one.
pub fn partition(total: usize, parts: usize) -> Vec<Range<usize>> {
    let (base, extra) = (total / parts, total % parts);
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Splits `slots` time steps for `fold`, requiring every block to hold at
/// least one window of `window_len` slots.
pub fn kfold_split(slots: usize, window_len: usize, spec: &SplitSpec, fold: usize) -> Result<SplitPlan> {
    spec.validate()?;
    if fold >= spec.folds {
        return Err(Error::config(format!("fold: must be below {}, got {fold}", spec.folds)));
    }
    let total = spec.total_parts();
    let minimum = total * window_len;
    if slots < minimum {
        return Err(Error::config(format!(
            "series too short: {slots} slots, need at least {minimum} ({total} parts × window {window_len})"
        )));
    }
    let parts = partition(slots, total);
    let mut plan = SplitPlan {
        parts: parts.clone(),
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for (role, part) in (0..total).map(|r| (r, (r + fold) % total)) {
        let range = parts[part].clone();
        if role < spec.train_parts {
            plan.train.push(range);
        } else if role < spec.train_parts + spec.valid_parts {
            plan.valid.push(range);
        } else {
            plan.test.push(range);
        }
    }
    plan.train.sort_by_key(|r| r.start);
    plan.valid.sort_by_key(|r| r.start);
    plan.test.sort_by_key(|r| r.start);
    Ok(plan)
}

/// Start indices of every `window_len` window lying inside one of `ranges`,
/// stepping by `stride` within each range.
pub fn window_starts(ranges: &[Range<usize>], window_len: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    ranges
        .iter()
        .flat_map(|r| {
            let last = r.end.checked_sub(window_len).filter(|&l| l >= r.start);
            last.into_iter().flat_map(move |l| (r.start..=l).step_by(stride))
        })
        .collect()
}
