//! Raw numeric kernels on flat slices.

/// `c = op(a) · op(b) + beta · c` for row-major operands, where `op` is an
/// optional transpose. `a` is `m×k` after `op`, `b` is `k×n` after `op`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: out length");
    if m == 0 || n == 0 {
        return;
    }
    // (row stride, col stride) of the logical operand
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and the strides address exactly
    // the m×k, k×n and m×n index ranges of those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Splits `shape` around `axis` into (outer, axis extent, inner) counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (shape `shape`) into a new buffer with axes reordered so that
/// output axis `i` is input axis `perm[i]`.
pub(crate) fn permute(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        // odometer increment over the output index
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
