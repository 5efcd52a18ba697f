use super::kernels::{self, gemm, sigmoid, split_axis};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation whose forward value is computed by the caller.
///
/// Implementors keep whatever forward state their adjoint needs.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradient with respect to each input (in input order), given the
    /// input values, the forward output and the upstream gradient.
    /// `None` means "no contribution".
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64])
        -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, batched: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Sigmoid(Var),
    Tanh(Var),
    Softmax { a: Var, axis: usize },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
    /// Backward has already run through this node.
    Cleared,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumSquares(_) => "sum_squares",
            Op::Custom { op, .. } => op.name(),
            Op::Cleared => "cleared",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Tensor>,
}

/// Records operations in execution order; node indices are therefore a
/// topological order and backward simply walks them in reverse.
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// How `b` broadcasts against `a` in a binary elementwise op.
fn broadcast_compatible(a: &[usize], b: &[usize]) -> bool {
    let first_real = b.iter().position(|&d| d != 1).unwrap_or(b.len());
    let core = &b[first_real..];
    core.len() <= a.len() && a[a.len() - core.len()..] == *core
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the post-op NaN/Inf check.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// A leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a leaf, or zeros if nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::Numeric {
                op: op.name(),
                detail: format!("output of shape {:?}", value.shape()),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Matrix product.
    ///
    /// Accepts `[.., m, k] · [k, n]` (leading axes of the left operand are
    /// flattened into rows) and batched `[B, m, k] · [B, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        if sb.len() == 2 {
            if sb[0] != k {
                return Err(Error::dim("matmul", &sa, &sb));
            }
            let n = sb[1];
            let rows = self.value(a).numel() / k;
            let mut out = vec![0.0; rows * n];
            gemm(rows, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, batched: false }, &[a, b])
        } else if sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sb[1] == k {
            let (batch, m, n) = (sa[0], sa[1], sb[2]);
            let mut out = vec![0.0; batch * m * n];
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    false,
                    &db[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            self.push(
                Tensor::from_parts(vec![batch, m, n], out),
                Op::MatMul { a, b, batched: true },
                &[a, b],
            )
        } else {
            Err(Error::dim("matmul", &sa, &sb))
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcast_compatible(ta.shape(), tb.shape()) {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let n = tb.numel();
        let db = tb.data();
        Ok(ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, db[i % n]))
            .collect())
    }

    /// Elementwise sum; either operand may broadcast over the other's leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if self.value(a).numel() < self.value(b).numel() { (b, a) } else { (a, b) };
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Add { a, b }, &[a, b])
    }

    /// Elementwise difference; `b` may broadcast over leading axes of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Sub { a, b }, &[a, b])
    }

    /// Elementwise (Hadamard) product with the same broadcasting as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if self.value(a).numel() < self.value(b).numel() { (b, a) } else { (a, b) };
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale { a, factor }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::dim("softmax", t.shape(), &[axis]));
        }
        if !t.all_finite() {
            return Err(Error::Numeric {
                op: "softmax",
                detail: "non-finite input".into(),
            });
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let max = (0..n).map(|j| x[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (x[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax { a, axis }, &[a])
    }

    /// Layer normalization over the last axis followed by `gamma · x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let t = self.value(x);
        let n = *t.shape().last().ok_or_else(|| Error::dim("layer_norm", &[], &[]))?;
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(Error::dim("layer_norm", t.shape(), self.shape(p)));
            }
        }
        let rows = t.numel() / n;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xs = t.data();
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = g[j] * h + b[j];
            }
        }
        let shape = t.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        )
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat { inputs: inputs.to_vec(), axis },
            inputs,
        )
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::dim("slice", &s, &[axis, start, len]));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&x[from..from + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(Tensor::from_parts(shape, out), Op::Slice { a, axis, start }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push(t, Op::Reshape(a), &[a])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", &s, perm));
        }
        let out = kernels::permute(self.value(a).data(), &s, perm);
        let shape = perm.iter().map(|&p| s[p]).collect();
        self.push(Tensor::from_parts(shape, out), Op::Permute { a, perm: perm.to_vec() }, &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::dim("transpose", self.shape(a), &[2]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Sum of squared elements (a scalar).
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(a), &[a])
    }

    /// Records a caller-computed value produced by `op` from `inputs`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, inputs)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Populates the gradient of every `requires_grad` leaf reachable from
    /// `loss`, then clears the recorded operations so the graph cannot be
    /// replayed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if matches!(self.nodes[loss.0].op, Op::Cleared) {
            return Err(Error::contract("backward already ran on this graph"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
            }
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.op = Op::Cleared;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Cleared => {}
            Op::MatMul { a, b, batched } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = *ta.shape().last().unwrap();
                if !*batched {
                    let n = tb.shape()[1];
                    let rows = ta.numel() / k;
                    if wants(*a) {
                        let slot = grad_slot(grads, *a, ta.numel());
                        gemm(rows, n, k, g, false, tb.data(), true, slot, true);
                    }
                    if wants(*b) {
                        let slot = grad_slot(grads, *b, tb.numel());
                        gemm(k, rows, n, ta.data(), true, g, false, slot, true);
                    }
                } else {
                    let (batch, m, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[2]);
                    if wants(*a) {
                        let slot = grad_slot(grads, *a, ta.numel());
                        for bi in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                false,
                                &tb.data()[bi * k * n..(bi + 1) * k * n],
                                true,
                                &mut slot[bi * m * k..(bi + 1) * m * k],
                                true,
                            );
                        }
                    }
                    if wants(*b) {
                        let slot = grad_slot(grads, *b, tb.numel());
                        for bi in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &ta.data()[bi * m * k..(bi + 1) * m * k],
                                true,
                                &g[bi * m * n..(bi + 1) * m * n],
                                false,
                                &mut slot[bi * k * n..(bi + 1) * k * n],
                                true,
                            );
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if wants(*a) {
                    let slot = grad_slot(grads, *a, g.len());
                    slot.iter_mut().zip(g).for_each(|(s, x)| *s += x);
                }
                if wants(*b) {
                    let n = self.value(*b).numel();
                    let slot = grad_slot(grads, *b, n);
                    for (j, x) in g.iter().enumerate() {
                        slot[j % n] += sign * x;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let n = tb.len();
                if wants(*a) {
                    let slot = grad_slot(grads, *a, g.len());
                    for (j, x) in g.iter().enumerate() {
                        slot[j] += x * tb[j % n];
                    }
                }
                if wants(*b) {
                    let slot = grad_slot(grads, *b, n);
                    for (j, x) in g.iter().enumerate() {
                        slot[j % n] += x * ta[j];
                    }
                }
            }
            Op::Scale { a, factor } => {
                let slot = grad_slot(grads, *a, g.len());
                slot.iter_mut().zip(g).for_each(|(s, x)| *s += factor * x);
            }
            Op::Sigmoid(a) => {
                let slot = grad_slot(grads, *a, g.len());
                for ((s, x), y) in slot.iter_mut().zip(g).zip(out.data()) {
                    *s += x * y * (1.0 - y);
                }
            }
            Op::Tanh(a) => {
                let slot = grad_slot(grads, *a, g.len());
                for ((s, x), y) in slot.iter_mut().zip(g).zip(out.data()) {
                    *s += x * (1.0 - y * y);
                }
            }
            Op::Softmax { a, axis } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                let slot = grad_slot(grads, *a, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let dot: f64 = (0..n).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..n {
                            let at = base + j * inner;
                            slot[at] += y[at] * (g[at] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = self.value(*gamma).numel();
                let rows = xhat.len() / n;
                let gam = self.value(*gamma).data();
                if wants(*gamma) {
                    let slot = grad_slot(grads, *gamma, n);
                    for (j, (gv, h)) in g.iter().zip(xhat).enumerate() {
                        slot[j % n] += gv * h;
                    }
                }
                if wants(*beta) {
                    let slot = grad_slot(grads, *beta, n);
                    for (j, gv) in g.iter().enumerate() {
                        slot[j % n] += gv;
                    }
                }
                if wants(*x) {
                    let slot = grad_slot(grads, *x, g.len());
                    for r in 0..rows {
                        let span = r * n..(r + 1) * n;
                        let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            let d = gr[j] * gam[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        let dst = &mut slot[span];
                        for j in 0..n {
                            let d = gr[j] * gam[j];
                            dst[j] += rstd[r] * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let t = self.value(v);
                    let len = t.shape()[*axis];
                    if wants(v) {
                        let slot = grad_slot(grads, v, t.numel());
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut slot[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let src_shape = self.shape(*a);
                let (outer, n, inner) = split_axis(src_shape, *axis);
                let len = out.shape()[*axis];
                let slot = grad_slot(grads, *a, outer * n * inner);
                for o in 0..outer {
                    let dst = &mut slot[(o * n + start) * inner..(o * n + start + len) * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            Op::Reshape(a) => {
                let slot = grad_slot(grads, *a, g.len());
                slot.iter_mut().zip(g).for_each(|(s, x)| *s += x);
            }
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = kernels::permute(g, out.shape(), &inverse);
                let slot = grad_slot(grads, *a, g.len());
                slot.iter_mut().zip(&back).for_each(|(s, x)| *s += x);
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = self.value(*a).numel();
                let scale = if matches!(node.op, Op::Mean(_)) { 1.0 / n as f64 } else { 1.0 };
                let slot = grad_slot(grads, *a, n);
                slot.iter_mut().for_each(|s| *s += g[0] * scale);
            }
            Op::SumSquares(a) => {
                let x = self.value(*a).data();
                let slot = grad_slot(grads, *a, x.len());
                slot.iter_mut().zip(x).for_each(|(s, v)| *s += 2.0 * v * g[0]);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let input_grads = op.backward(&values, out, g);
                for (&v, ig) in inputs.iter().zip(input_grads) {
                    if let (true, Some(ig)) = (wants(v), ig) {
                        let slot = grad_slot(grads, v, ig.len());
                        slot.iter_mut().zip(&ig).for_each(|(s, x)| *s += x);
                    }
                }
            }
        }
    }
}
