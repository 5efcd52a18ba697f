use crate::error::{Error, Result};
use crate::model::TsbParams;
use crate::params::{Binding, ParamKind};
use crate::tensor::{Graph, Var};

/// Mean squared error over all cells plus `(η/2)·Σ‖W‖²` over `weights`.
pub fn mse_l2_loss(g: &mut Graph, pred: Var, target: Var, weights: &[Var], l2: f64) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::dim("mse_l2_loss", g.shape(pred), g.shape(target)));
    }
    let diff = g.sub(pred, target)?;
    let sq = g.sum_squares(diff)?;
    let n = g.value(pred).numel() as f64;
    let mse = g.scale(sq, 1.0 / n)?;
    if l2 == 0.0 || weights.is_empty() {
        return Ok(mse);
    }
    let mut penalty = g.sum_squares(weights[0])?;
    for &w in &weights[1..] {
        let s = g.sum_squares(w)?;
        penalty = g.add(penalty, s)?;
    }
    let penalty = g.scale(penalty, 0.5 * l2)?;
    g.add(mse, penalty)
}

/// The L2-regularized subset of a bound model: every weight matrix, but no
/// biases or normalization affines.
pub fn regularized_weights(params: &TsbParams, binding: &Binding) -> Vec<Var> {
    params
        .store
        .ids()
        .filter(|&id| params.store.kind(id) == ParamKind::Weight)
        .map(|id| binding[id])
        .collect()
}
