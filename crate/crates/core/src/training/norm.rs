use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Below this the standard deviation is replaced by 1.
pub const MIN_STD: f64 = 1e-8;

/// Global mean and standard deviation of power values (dBm), computed on the
/// training split only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    /// Population moments of `values`; a near-constant series gets `std = 1`.
    pub fn fit<'a>(values: impl IntoIterator<Item = &'a f64>) -> Self {
        let v: Vec<f64> = values.into_iter().copied().collect();
        if v.is_empty() {
            return NormStats { mean: 0.0, std: 1.0 };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        NormStats {
            mean,
            std: if std < MIN_STD { 1.0 } else { std },
        }
    }

    pub fn normalize_value(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn denormalize_value(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// `(x − μ) / σ` elementwise.
pub fn zscore_normalize(x: &Tensor, stats: &NormStats) -> Tensor {
    x.map(|v| stats.normalize_value(v))
}

/// Exact inverse of [`zscore_normalize`] (up to rounding).
pub fn denormalize(z: &Tensor, stats: &NormStats) -> Tensor {
    z.map(|v| stats.denormalize_value(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_series_normalizes_to_zero() {
        let x = Tensor::full(&[3, 4], -90.0);
        let stats = NormStats::fit(x.data());
        assert_eq!(stats.std, 1.0);
        assert!(zscore_normalize(&x, &stats).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_fit_data_has_unit_moments() {
        let x = Tensor::new(vec![6], vec![-90.0, -88.5, -35.0, -47.0, -91.2, -60.0]).unwrap();
        let stats = NormStats::fit(x.data());
        let z = zscore_normalize(&x, &stats);
        let mean = z.data().iter().sum::<f64>() / 6.0;
        let var = z.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-9);
        assert!((var.sqrt() - 1.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn roundtrip(values in prop::collection::vec(-120.0f64..0.0, 1..40), mean in -100.0f64..0.0, std in 0.1f64..30.0) {
            let stats = NormStats { mean, std };
            let x = Tensor::new(vec![values.len()], values).unwrap();
            let back = denormalize(&zscore_normalize(&x, &stats), &stats);
            prop_assert!(back.max_abs_diff(&x) < 1e-12);
        }
    }
}
