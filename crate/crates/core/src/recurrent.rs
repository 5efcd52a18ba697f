//! LSTM cells, bidirectional layers and the stacked Bi-LSTM sublayer.
//!
//! Weights use the row-vector convention: a gate pre-activation is
//! `p·W + h·U + b`, so `W` is stored `D × H` and `U` is `H × H` (the
//! transposes of the column-vector `W p` form). Gate order everywhere is
//! forget, input, candidate, output.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamKind, ParamStore};
use crate::tensor::kernels::{gemm, sigmoid};
use crate::tensor::{CustomOp, Graph, Tensor, Var};

/// The twelve parameter groups of one LSTM cell.
#[derive(Clone, Copy, Debug)]
pub struct LstmCellParams {
    pub input_size: usize,
    pub hidden: usize,
    pub w_f: ParamId,
    pub w_i: ParamId,
    pub w_c: ParamId,
    pub w_o: ParamId,
    pub u_f: ParamId,
    pub u_i: ParamId,
    pub u_c: ParamId,
    pub u_o: ParamId,
    pub b_f: ParamId,
    pub b_i: ParamId,
    pub b_c: ParamId,
    pub b_o: ParamId,
}

impl LstmCellParams {
    /// Weights `uniform(−1/√H, 1/√H)`, biases zero.
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, input_size: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut w = |gate: &str| store.add_uniform(format!("{prefix}.w_{gate}"), &[input_size, hidden], bound, rng);
        let (w_f, w_i, w_c, w_o) = (w("f"), w("i"), w("c"), w("o"));
        let mut u = |gate: &str| store.add_uniform(format!("{prefix}.u_{gate}"), &[hidden, hidden], bound, rng);
        let (u_f, u_i, u_c, u_o) = (u("f"), u("i"), u("c"), u("o"));
        let mut b = |gate: &str| store.add(format!("{prefix}.b_{gate}"), ParamKind::Bias, Tensor::zeros(&[hidden]));
        let (b_f, b_i, b_c, b_o) = (b("f"), b("i"), b("c"), b("o"));
        LstmCellParams {
            input_size,
            hidden,
            w_f,
            w_i,
            w_c,
            w_o,
            u_f,
            u_i,
            u_c,
            u_o,
            b_f,
            b_i,
            b_c,
            b_o,
        }
    }

    pub fn ids(&self) -> [ParamId; 12] {
        [
            self.w_f, self.w_i, self.w_c, self.w_o, self.u_f, self.u_i, self.u_c, self.u_o, self.b_f, self.b_i,
            self.b_c, self.b_o,
        ]
    }

    /// Gate-fused `(W [D,4H], U [H,4H], b [4H])` recorded on the graph.
    fn fused(&self, g: &mut Graph, params: &Binding) -> Result<(Var, Var, Var)> {
        let w = g.concat(&[params[self.w_f], params[self.w_i], params[self.w_c], params[self.w_o]], 1)?;
        let u = g.concat(&[params[self.u_f], params[self.u_i], params[self.u_c], params[self.u_o]], 1)?;
        let b = g.concat(&[params[self.b_f], params[self.b_i], params[self.b_c], params[self.b_o]], 0)?;
        Ok((w, u, b))
    }
}

/// One LSTM step built from primitive graph ops.
///
/// `p_t` is `[B, D]`, `h_prev` and `c_prev` are `[B, H]`; returns `(h_t, c_t)`.
pub fn lstm_cell_step(
    g: &mut Graph,
    params: &Binding,
    cell: &LstmCellParams,
    p_t: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let (sp, sh, sc) = (g.shape(p_t).to_vec(), g.shape(h_prev).to_vec(), g.shape(c_prev).to_vec());
    if sp.len() != 2 || sp[1] != cell.input_size || sh != [sp[0], cell.hidden] || sc != sh {
        return Err(Error::dim("lstm_cell_step", &sp, &sh));
    }
    let gate = |g: &mut Graph, w: ParamId, u: ParamId, b: ParamId| -> Result<Var> {
        let xw = g.matmul(p_t, params[w])?;
        let hu = g.matmul(h_prev, params[u])?;
        let s = g.add(xw, hu)?;
        g.add(s, params[b])
    };
    let f_pre = gate(g, cell.w_f, cell.u_f, cell.b_f)?;
    let i_pre = gate(g, cell.w_i, cell.u_i, cell.b_i)?;
    let c_pre = gate(g, cell.w_c, cell.u_c, cell.b_c)?;
    let o_pre = gate(g, cell.w_o, cell.u_o, cell.b_o)?;
    let f = g.sigmoid(f_pre)?;
    let i = g.sigmoid(i_pre)?;
    let candidate = g.tanh(c_pre)?;
    let o = g.sigmoid(o_pre)?;
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, candidate)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// Fused recurrence over a whole sequence given precomputed input
/// projections. Saves gate activations and cell states for the adjoint.
struct LstmScan {
    batch: usize,
    steps: usize,
    hidden: usize,
    reverse: bool,
    /// Activated gates `[B, T, 4H]` in f, i, c̃, o order.
    gates: Vec<f64>,
    /// Cell states `[B, T, H]`.
    cells: Vec<f64>,
}

impl LstmScan {
    fn order(&self) -> Vec<usize> {
        if self.reverse {
            (0..self.steps).rev().collect()
        } else {
            (0..self.steps).collect()
        }
    }

    fn run(xproj: &Tensor, u: &Tensor, reverse: bool) -> (Self, Vec<f64>) {
        let (batch, steps, four_h) = (xproj.shape()[0], xproj.shape()[1], xproj.shape()[2]);
        let hidden = four_h / 4;
        let mut scan = LstmScan {
            batch,
            steps,
            hidden,
            reverse,
            gates: vec![0.0; batch * steps * four_h],
            cells: vec![0.0; batch * steps * hidden],
        };
        let mut out = vec![0.0; batch * steps * hidden];
        let mut h = vec![0.0; batch * hidden];
        let mut c = vec![0.0; batch * hidden];
        let mut pre = vec![0.0; batch * four_h];
        let x = xproj.data();
        for t in scan.order() {
            for b in 0..batch {
                let src = (b * steps + t) * four_h;
                pre[b * four_h..(b + 1) * four_h].copy_from_slice(&x[src..src + four_h]);
            }
            gemm(batch, hidden, four_h, &h, false, u.data(), false, &mut pre, true);
            for b in 0..batch {
                let p = &pre[b * four_h..(b + 1) * four_h];
                let gbase = (b * steps + t) * four_h;
                let sbase = (b * steps + t) * hidden;
                for j in 0..hidden {
                    let f = sigmoid(p[j]);
                    let i = sigmoid(p[hidden + j]);
                    let cand = p[2 * hidden + j].tanh();
                    let o = sigmoid(p[3 * hidden + j]);
                    let cj = f * c[b * hidden + j] + i * cand;
                    let hj = o * cj.tanh();
                    c[b * hidden + j] = cj;
                    h[b * hidden + j] = hj;
                    scan.gates[gbase + j] = f;
                    scan.gates[gbase + hidden + j] = i;
                    scan.gates[gbase + 2 * hidden + j] = cand;
                    scan.gates[gbase + 3 * hidden + j] = o;
                    scan.cells[sbase + j] = cj;
                    out[sbase + j] = hj;
                }
            }
        }
        (scan, out)
    }
}

impl CustomOp for LstmScan {
    fn name(&self) -> &'static str {
        "lstm_scan"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (batch, steps, hidden) = (self.batch, self.steps, self.hidden);
        let four_h = 4 * hidden;
        let u = inputs[1].data();
        let hs = output.data();
        let mut dx = vec![0.0; batch * steps * four_h];
        let mut du = vec![0.0; hidden * four_h];
        let mut dh_next = vec![0.0; batch * hidden];
        let mut dc_next = vec![0.0; batch * hidden];
        let mut dpre = vec![0.0; batch * four_h];
        let mut h_prev = vec![0.0; batch * hidden];
        let order = self.order();
        for (pos, &t) in order.iter().enumerate().rev() {
            let prev = pos.checked_sub(1).map(|p| order[p]);
            for b in 0..batch {
                let gbase = (b * steps + t) * four_h;
                let sbase = (b * steps + t) * hidden;
                let pbase = prev.map(|tp| (b * steps + tp) * hidden);
                for j in 0..hidden {
                    let f = self.gates[gbase + j];
                    let i = self.gates[gbase + hidden + j];
                    let cand = self.gates[gbase + 2 * hidden + j];
                    let o = self.gates[gbase + 3 * hidden + j];
                    let c = self.cells[sbase + j];
                    let c_prev = pbase.map_or(0.0, |p| self.cells[p + j]);
                    let tc = c.tanh();
                    let dh = grad_out[sbase + j] + dh_next[b * hidden + j];
                    let dc = dc_next[b * hidden + j] + dh * o * (1.0 - tc * tc);
                    let d = &mut dpre[b * four_h..(b + 1) * four_h];
                    d[j] = dc * c_prev * f * (1.0 - f);
                    d[hidden + j] = dc * cand * i * (1.0 - i);
                    d[2 * hidden + j] = dc * i * (1.0 - cand * cand);
                    d[3 * hidden + j] = dh * tc * o * (1.0 - o);
                    dc_next[b * hidden + j] = dc * f;
                    h_prev[b * hidden + j] = pbase.map_or(0.0, |p| hs[p + j]);
                }
                dx[gbase..gbase + four_h].copy_from_slice(&dpre[b * four_h..(b + 1) * four_h]);
            }
            if prev.is_some() {
                gemm(hidden, batch, four_h, &h_prev, true, &dpre, false, &mut du, true);
            }
            gemm(batch, four_h, hidden, &dpre, false, u, true, &mut dh_next, false);
        }
        vec![Some(dx), Some(du)]
    }
}

/// Runs one direction of an LSTM over `xproj = x·W + b` (`[B, T, 4H]`) with
/// recurrent weights `u` (`[H, 4H]`), from zero initial state. Returns the
/// hidden states `[B, T, H]` aligned to the original time index.
pub fn lstm_scan(g: &mut Graph, xproj: Var, u: Var, reverse: bool) -> Result<Var> {
    let (sx, su) = (g.shape(xproj).to_vec(), g.shape(u).to_vec());
    if sx.len() != 3 || sx[2] % 4 != 0 || su != [sx[2] / 4, sx[2]] {
        return Err(Error::dim("lstm_scan", &sx, &su));
    }
    let (scan, out) = LstmScan::run(g.value(xproj), g.value(u), reverse);
    let shape = vec![sx[0], sx[1], sx[2] / 4];
    g.custom(&[xproj, u], Tensor::from_parts(shape, out), Box::new(scan))
}

/// Forward and backward cells; outputs are concatenated (forward first).
#[derive(Clone, Copy, Debug)]
pub struct BiLstmLayer {
    pub forward: LstmCellParams,
    pub backward: LstmCellParams,
}

impl BiLstmLayer {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, input_size: usize, hidden: usize, rng: &mut R) -> Self {
        BiLstmLayer {
            forward: LstmCellParams::init(store, &format!("{prefix}.fwd"), input_size, hidden, rng),
            backward: LstmCellParams::init(store, &format!("{prefix}.bwd"), input_size, hidden, rng),
        }
    }

    pub fn output_size(&self) -> usize {
        2 * self.forward.hidden
    }
}

fn direction(g: &mut Graph, params: &Binding, cell: &LstmCellParams, x: Var, reverse: bool) -> Result<Var> {
    let (w, u, b) = cell.fused(g, params)?;
    let xw = g.matmul(x, w)?;
    let xproj = g.add(xw, b)?;
    lstm_scan(g, xproj, u, reverse)
}

/// Bidirectional layer over `[T, D]` or `[B, T, D]`; returns `[.., T, 2H]`
/// with row `t` = `[h_fwd(t), h_bwd(t)]`.
pub fn bilstm_layer_forward(g: &mut Graph, params: &Binding, layer: &BiLstmLayer, x: Var) -> Result<Var> {
    bilstm_layer_forward_with(g, params, layer, x, false)
}

/// As [`bilstm_layer_forward`]; with `causal` the backward cell restarts
/// from zero state at every row, so row `t` depends on rows `≤ t` only.
pub fn bilstm_layer_forward_with(g: &mut Graph, params: &Binding, layer: &BiLstmLayer, x: Var, causal: bool) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let d = layer.forward.input_size;
    let batched = match s.len() {
        2 if s[1] == d => false,
        3 if s[2] == d => true,
        _ => return Err(Error::dim("bilstm_layer_forward", &s, &[d])),
    };
    let x3 = if batched { x } else { g.reshape(x, &[1, s[0], s[1]])? };
    let fwd = direction(g, params, &layer.forward, x3, false)?;
    let bwd = if causal {
        let (b, t) = (g.shape(x3)[0], g.shape(x3)[1]);
        let rows = g.reshape(x3, &[b * t, 1, d])?;
        let h = direction(g, params, &layer.backward, rows, true)?;
        g.reshape(h, &[b, t, layer.backward.hidden])?
    } else {
        direction(g, params, &layer.backward, x3, true)?
    };
    let out = g.concat(&[fwd, bwd], 2)?;
    if batched {
        Ok(out)
    } else {
        g.reshape(out, &[s[0], layer.output_size()])
    }
}

/// `L_Bi` bidirectional layers with hidden size `d_model / 2` each, so every
/// layer maps `d_model` to `d_model`.
#[derive(Clone, Debug)]
pub struct StackedBiLstm {
    pub layers: Vec<BiLstmLayer>,
}

impl StackedBiLstm {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, d_model: usize, depth: usize, rng: &mut R) -> Result<Self> {
        if !d_model.is_multiple_of(2) || d_model == 0 {
            return Err(Error::config(format!("d_model: must be even for the Bi-LSTM stack, got {d_model}")));
        }
        if depth == 0 {
            return Err(Error::config("bilstm_layers: must be at least 1"));
        }
        let hidden = d_model / 2;
        let layers = (0..depth)
            .map(|l| BiLstmLayer::init(store, &format!("{prefix}.{l}"), d_model, hidden, rng))
            .collect();
        Ok(StackedBiLstm { layers })
    }
}

pub fn stacked_bilstm_forward(g: &mut Graph, params: &Binding, stack: &StackedBiLstm, x: Var) -> Result<Var> {
    stacked_bilstm_forward_with(g, params, stack, x, false)
}

pub fn stacked_bilstm_forward_with(
    g: &mut Graph,
    params: &Binding,
    stack: &StackedBiLstm,
    x: Var,
    causal: bool,
) -> Result<Var> {
    stack
        .layers
        .iter()
        .try_fold(x, |h, layer| bilstm_layer_forward_with(g, params, layer, h, causal))
}
