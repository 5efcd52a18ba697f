use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Repeats the last input row `[.., T, F]` for `horizon` rows.
pub fn persistence_forecast(enc_in: &Tensor, horizon: usize) -> Result<Tensor> {
    let (n, t, f) = match *enc_in.shape() {
        [t, f] => (1, t, f),
        [n, t, f] => (n, t, f),
        _ => return Err(Error::dim("persistence", enc_in.shape(), &[3])),
    };
    if t == 0 {
        return Err(Error::contract("persistence needs at least one input row"));
    }
    let mut out = Vec::with_capacity(n * horizon * f);
    for w in 0..n {
        let last = &enc_in.data()[(w * t + t - 1) * f..(w * t + t) * f];
        for _ in 0..horizon {
            out.extend_from_slice(last);
        }
    }
    let shape = if enc_in.rank() == 2 { vec![horizon, f] } else { vec![n, horizon, f] };
    Tensor::new(shape, out)
}

/// Per-channel `x(t+1) − μ = φ·(x(t) − μ)`, fitted by least squares.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ar1Model {
    pub mean: Vec<f64>,
    pub phi: Vec<f64>,
}

impl Ar1Model {
    /// Fits on the rows of a time-major `[T, F]` series that fall in `ranges`;
    /// transitions never cross a range boundary.
    pub fn fit(series: &Tensor, ranges: &[Range<usize>]) -> Result<Self> {
        if series.rank() != 2 {
            return Err(Error::dim("ar1 fit", series.shape(), &[2]));
        }
        let f = series.shape()[1];
        let x = |s: usize, c: usize| series.data()[s * f + c];
        let mut mean = vec![0.0; f];
        let mut count = 0usize;
        for r in ranges {
            for s in r.clone() {
                for (c, m) in mean.iter_mut().enumerate() {
                    *m += x(s, c);
                }
            }
            count += r.len();
        }
        if count < 2 {
            return Err(Error::contract("ar1 fit needs at least two rows"));
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut phi = vec![0.0; f];
        for (c, p) in phi.iter_mut().enumerate() {
            let (mut num, mut den) = (0.0, 0.0);
            for r in ranges {
                for s in r.start..r.end.saturating_sub(1) {
                    let (a, b) = (x(s, c) - mean[c], x(s + 1, c) - mean[c]);
                    num += a * b;
                    den += a * a;
                }
            }
            *p = if den > 0.0 { (num / den).clamp(-1.0, 1.0) } else { 0.0 };
        }
        Ok(Ar1Model { mean, phi })
    }

    /// Iterated forecast from the last input row: `μ + φᵏ·(x_last − μ)`.
    pub fn forecast(&self, enc_in: &Tensor, horizon: usize) -> Result<Tensor> {
        let last = persistence_forecast(enc_in, 1)?;
        let f = self.mean.len();
        if *last.shape().last().unwrap_or(&0) != f {
            return Err(Error::dim("ar1 forecast", enc_in.shape(), &[f]));
        }
        let n = last.numel() / f;
        let mut out = Vec::with_capacity(n * horizon * f);
        for w in 0..n {
            let row = &last.data()[w * f..(w + 1) * f];
            let mut dev: Vec<f64> = row.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
            for _ in 0..horizon {
                for c in 0..f {
                    dev[c] *= self.phi[c];
                    out.push(self.mean[c] + dev[c]);
                }
            }
        }
        let shape = if enc_in.rank() == 2 { vec![horizon, f] } else { vec![n, horizon, f] };
        Tensor::new(shape, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn persistence_repeats_last_row() {
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = persistence_forecast(&x, 2).unwrap();
        assert_eq!(p.shape(), &[2, 2]);
        assert_eq!(p.data(), &[5.0, 6.0, 5.0, 6.0]);
    }

    #[test]
    fn ar1_recovers_a_geometric_decay() {
        let series: Vec<f64> = (0..40).map(|s| 10.0 + 0.5f64.powi(s % 20)).collect();
        let t = Tensor::new(vec![40, 1], series).unwrap();
        let m = Ar1Model::fit(&t, &[0..20, 20..40]).unwrap();
        assert!(m.phi[0] > 0.0 && m.phi[0] <= 1.0);
        let fc = m.forecast(&Tensor::new(vec![1, 1], vec![12.0]).unwrap(), 3).unwrap();
        let d0 = 12.0 - m.mean[0];
        assert!((fc.data()[2] - (m.mean[0] + d0 * m.phi[0].powi(3))).abs() < 1e-12);
    }
}
