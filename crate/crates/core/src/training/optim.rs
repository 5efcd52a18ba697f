use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SGDM_MOMENTUM: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgdm,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgdm" => Ok(OptimizerKind::Sgdm),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::config(format!("optimizer: unknown value {other:?}"))),
        }
    }
}

/// Per-parameter optimizer slots, laid out like the parameter list.
#[derive(Clone, Debug)]
pub enum OptimizerState {
    Sgd,
    Sgdm { velocity: Vec<Vec<f64>> },
    Adam { m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, step: u64 },
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect::<Vec<_>>();
        let state = match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Sgdm => OptimizerState::Sgdm { velocity: zeros() },
            OptimizerKind::Adam => OptimizerState::Adam {
                m: zeros(),
                v: zeros(),
                step: 0,
            },
        };
        Optimizer {
            kind,
            learning_rate,
            momentum: SGDM_MOMENTUM,
            state,
        }
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    /// Applies one update in place.
    ///
    /// SGD: `w ← w − αg`. SGDM: `v ← μv + g; w ← w − αv`. Adam: bias-corrected
    /// first and second moments.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::contract(format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        let lr = self.learning_rate;
        match &mut self.state {
            OptimizerState::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.data_mut().iter_mut().zip(g.data()).for_each(|(w, gv)| *w -= lr * gv);
                }
            }
            OptimizerState::Sgdm { velocity } => {
                let mu = self.momentum;
                for ((p, g), vel) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
                    for ((w, gv), v) in p.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                        *v = mu * *v + gv;
                        *w -= lr * *v;
                    }
                }
            }
            OptimizerState::Adam { m, v, step } => {
                *step += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(*step as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(*step as i32);
                for (((p, g), ms), vs) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    for (((w, &gv), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(ms.iter_mut()).zip(vs.iter_mut()) {
                        *mj = ADAM_BETA1 * *mj + (1.0 - ADAM_BETA1) * gv;
                        *vj = ADAM_BETA2 * *vj + (1.0 - ADAM_BETA2) * gv * gv;
                        let m_hat = *mj / c1;
                        let v_hat = *vj / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Vec<Tensor> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn sgd_substitution() {
        let mut p = one(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, &p);
        opt.step(&mut p, &one(0.5)).unwrap();
        assert!((p[0].item().unwrap() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let grads = [0.3, -1.2, 0.7, 0.05];
        let mut a = one(0.4);
        let mut b = one(0.4);
        let mut sgd = Optimizer::new(OptimizerKind::Sgd, 0.05, &a);
        let mut sgdm = Optimizer::new(OptimizerKind::Sgdm, 0.05, &b).with_momentum(0.0);
        for g in grads {
            sgd.step(&mut a, &one(g)).unwrap();
            sgdm.step(&mut b, &one(g)).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut p = one(0.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgdm, 1.0, &p);
        opt.step(&mut p, &one(1.0)).unwrap();
        opt.step(&mut p, &one(1.0)).unwrap();
        // v1 = 1, v2 = 1.9
        assert!((p[0].item().unwrap() + 2.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_has_magnitude_alpha() {
        let mut p = one(2.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.001, &p);
        opt.step(&mut p, &one(0.3)).unwrap();
        let want = 2.0 - 0.001 * 0.3 / (0.3 + ADAM_EPS);
        assert!((p[0].item().unwrap() - want).abs() < 1e-15);
        assert!((2.0 - p[0].item().unwrap() - 0.001).abs() < 1e-10);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut p = vec![Tensor::scalar(1.0), Tensor::scalar(2.0)];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, &p);
        assert!(matches!(opt.step(&mut p, &one(1.0)), Err(Error::Contract(_))));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        let mut small = vec![Tensor::new(vec![2], vec![0.3, 0.4]).unwrap()];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.3, 0.4]);
    }

    #[test]
    fn parses_names() {
        assert_eq!("sgdm".parse::<OptimizerKind>().unwrap(), OptimizerKind::Sgdm);
        assert!("rmsprop".parse::<OptimizerKind>().is_err());
    }
}
