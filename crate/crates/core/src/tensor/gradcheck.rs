use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing autodiff gradients with central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// (input index, flat element index) where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    /// Number of scalar partial derivatives compared.
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Checks the gradient of scalar-valued `f` at `inputs`.
///
/// `f` receives a fresh graph and one `requires_grad` leaf per input, and must
/// return a scalar. Each partial is compared against
/// `(f(x + h·e) − f(x − h·e)) / 2h`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::contract("grad_check step must be positive"));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut work = inputs.to_vec();
    let mut max_rel_error: f64 = 0.0;
    let mut worst = None;
    let mut checked = 0;
    for (ti, grad) in analytic.iter().enumerate() {
        for e in 0..grad.numel() {
            let orig = work[ti].data()[e];
            work[ti].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[e];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if rel > max_rel_error || worst.is_none() {
                max_rel_error = max_rel_error.max(rel);
                worst = Some((ti, e));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        checked,
        tol,
        passed: max_rel_error < tol,
    })
}
