// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward and backward kernels for the differentiable operations.
//!
//! Everything here works on raw row-major slices. The [`crate::graph`] layer
//! does shape validation and wires the backward kernels into the tape.

use crate::error::{mismatch, KernelError, Result};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(x)` is `x` or `xᵀ`. `a` is logically `m×k`, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // Row-major storage: logical element (i, j) of a non-transposed `a` sits
    // at i*k + j; of a transposed one (stored k×m) at j*m + i.
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover m*k, k*n and m*n elements (asserted above) and
    // the strides address exactly those ranges.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(mismatch("matmul", format!("{m}x{k} times {k2}x{n}")));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a.data(), false, b.data(), false, 0.0, &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// How the right operand of `add` lines up with the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    /// Right operand is a row vector added to every row of the left.
    Row,
}

pub fn add_broadcast_kind(a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Same);
    }
    if a.is_matrix() {
        let cols = a.cols();
        let row_like = match b.shape() {
            [n] => *n == cols,
            [1, n] => *n == cols,
            _ => false,
        };
        if row_like {
            return Ok(Broadcast::Row);
        }
    }
    Err(mismatch(
        "add",
        format!("{:?} + {:?}", a.shape(), b.shape()),
    ))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match add_broadcast_kind(a, b)? {
        Broadcast::Same => a.add(b),
        Broadcast::Row => {
            let cols = a.cols();
            let mut out = a.data().to_vec();
            for row in out.chunks_mut(cols) {
                for (o, bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            Ok(Tensor::from_parts(a.shape().to_vec(), out))
        }
    }
}

/// Sums the rows of a row-major `rows×cols` block into `acc`.
pub(crate) fn accumulate_column_sums(grad: &[f64], cols: usize, acc: &mut [f64]) {
    for row in grad.chunks(cols) {
        for (a, g) in acc.iter_mut().zip(row) {
            *a += g;
        }
    }
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, cols) = x.dims2("softmax_rows")?;
    if cols == 0 {
        return Err(KernelError::Empty { op: "softmax_rows" });
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(cols) {
        softmax_in_place(row);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub(crate) fn softmax_rows_backward(y: &[f64], dy: &[f64], cols: usize, dx: &mut [f64]) {
    for ((yr, dyr), dxr) in y.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d += yv * (g - dot);
        }
    }
}

/// Cached per-row statistics from a layer-norm forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn layernorm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let (rows, cols) = x.dims2("layernorm")?;
    if eps <= 0.0 {
        return Err(KernelError::InvalidArgument {
            op: "layernorm",
            detail: format!("epsilon must be positive, got {eps}"),
        });
    }
    if gain.len() != cols || bias.len() != cols {
        return Err(mismatch(
            "layernorm",
            format!(
                "row width {cols}, gain {:?}, bias {:?}",
                gain.shape(),
                bias.shape()
            ),
        ));
    }
    if cols == 0 {
        return Err(KernelError::Empty { op: "layernorm" });
    }
    let mut out = vec![0.0; rows * cols];
    let mut normalized = vec![0.0; rows * cols];
    let mut inv_std = vec![0.0; rows];
    let n = cols as f64;
    for r in 0..rows {
        let xr = &x.data()[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / n;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        let nr = &mut normalized[r * cols..(r + 1) * cols];
        let or = &mut out[r * cols..(r + 1) * cols];
        for c in 0..cols {
            let h = (xr[c] - mean) * inv;
            nr[c] = h;
            or[c] = h * gain.data()[c] + bias.data()[c];
        }
    }
    Ok((
        Tensor::from_parts(vec![rows, cols], out),
        LayerNormCache {
            normalized,
            inv_std,
        },
    ))
}

pub(crate) fn layernorm_backward(
    cache: &LayerNormCache,
    gain: &[f64],
    dy: &[f64],
    cols: usize,
    dx: Option<&mut [f64]>,
    dgain: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) {
    if let Some(dg) = dgain {
        for (xh, g) in cache.normalized.chunks(cols).zip(dy.chunks(cols)) {
            for c in 0..cols {
                dg[c] += g[c] * xh[c];
            }
        }
    }
    if let Some(db) = dbias {
        accumulate_column_sums(dy, cols, db);
    }
    if let Some(dx) = dx {
        let n = cols as f64;
        let mut dxhat = vec![0.0; cols];
        for (r, (xh, g)) in cache
            .normalized
            .chunks(cols)
            .zip(dy.chunks(cols))
            .enumerate()
        {
            let mut mean_d = 0.0;
            let mut mean_dx = 0.0;
            for c in 0..cols {
                dxhat[c] = g[c] * gain[c];
                mean_d += dxhat[c];
                mean_dx += dxhat[c] * xh[c];
            }
            mean_d /= n;
            mean_dx /= n;
            let inv = cache.inv_std[r];
            let dr = &mut dx[r * cols..(r + 1) * cols];
            for c in 0..cols {
                dr[c] += inv * (dxhat[c] - mean_d - xh[c] * mean_dx);
            }
        }
    }
}

/// `tanh` through one `exp`; noticeably faster than the libm routine.
#[inline]
fn fast_tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    let e = (2.0 * u).exp();
    (e - 1.0) / (e + 1.0)
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x)))
}

pub fn gelu_derivative(x: f64) -> f64 {
    let t = fast_tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Lifts scalars into `d`-dimensional rows: `out[i] = values[i] * w + b`.
pub fn embed_scalar(values: &[f64], weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = weight.len();
    if bias.len() != d {
        return Err(mismatch(
            "embed_scalar",
            format!("weight {:?}, bias {:?}", weight.shape(), bias.shape()),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(KernelError::NonFinite { op: "embed_scalar" });
    }
    let mut out = Vec::with_capacity(values.len() * d);
    for &s in values {
        out.extend(
            weight
                .data()
                .iter()
                .zip(bias.data())
                .map(|(w, b)| s * w + b),
        );
    }
    Ok(Tensor::from_parts(vec![values.len(), d], out))
}

/// Adds positional rows: row `r` of `x` gets `pos[r % seq_len]`.
pub fn add_positional(x: &Tensor, pos: &Tensor, seq_len: usize) -> Result<Tensor> {
    let (rows, d) = x.dims2("add_positional")?;
    let (max_pos, pd) = pos.dims2("add_positional")?;
    if pd != d || seq_len == 0 || seq_len > max_pos || rows % seq_len != 0 {
        return Err(mismatch(
            "add_positional",
            format!(
                "x {rows}x{d}, positions {max_pos}x{pd}, sequence length {seq_len}"
            ),
        ));
    }
    let mut out = x.data().to_vec();
    for (r, row) in out.chunks_mut(d).enumerate() {
        let p = &pos.data()[(r % seq_len) * d..(r % seq_len + 1) * d];
        for (o, pv) in row.iter_mut().zip(p) {
            *o += pv;
        }
    }
    Ok(Tensor::from_parts(vec![rows, d], out))
}

/// Geometry of a batched causal self-attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
}

impl AttentionShape {
    fn validate(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<usize> {
        let (rows, d) = q.dims2("causal_attention")?;
        if k.shape() != q.shape() || v.shape() != q.shape() {
            return Err(mismatch(
                "causal_attention",
                format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
            ));
        }
        if self.heads == 0 || d % self.heads != 0 || rows != self.batch * self.seq_len {
            return Err(mismatch(
                "causal_attention",
                format!(
                    "{rows}x{d} rows for batch {} x seq {} with {} heads",
                    self.batch, self.seq_len, self.heads
                ),
            ));
        }
        Ok(d)
    }
}

/// Row-major matrix view into a slice: element `(i, j)` at `i * rs + j * cs`.
#[derive(Clone, Copy)]
struct View {
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl View {
    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }

    fn t(self) -> View {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = alpha * a * b + beta * c` on strided views.
fn gemm_view(alpha: f64, a: &[f64], av: View, b: &[f64], bv: View, beta: f64, c: &mut [f64], cv: View) {
    assert!(av.cols == bv.rows && av.rows == cv.rows && bv.cols == cv.cols);
    assert!(a.len() >= av.span() && b.len() >= bv.span() && c.len() >= cv.span());
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    // SAFETY: the asserts above bound every addressed element by the slice
    // lengths.
    unsafe {
        matrixmultiply::dgemm(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr(),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr(),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr(),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Multi-head causal attention with `1/sqrt(d_head)` score scaling.
///
/// Returns the attended values and the lower-triangular attention
/// probabilities laid out as `[batch][head][query][key]` (`seq_len²` slots per
/// head, entries above the diagonal left at zero).
pub fn causal_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    shape: AttentionShape,
) -> Result<(Tensor, Vec<f64>)> {
    let d = shape.validate(q, k, v)?;
    let AttentionShape {
        batch,
        seq_len: t,
        heads,
    } = shape;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; batch * t * d];
    let mut probs = vec![0.0; batch * heads * t * t];
    let head = View {
        rows: t,
        cols: dh,
        rs: d,
        cs: 1,
    };
    let square = View {
        rows: t,
        cols: t,
        rs: t,
        cs: 1,
    };
    for b in 0..batch {
        for h in 0..heads {
            let off = b * t * d + h * dh;
            let pbase = (b * heads + h) * t * t;
            let p = &mut probs[pbase..pbase + t * t];
            gemm_view(scale, &qd[off..], head, &kd[off..], head.t(), 0.0, p, square);
            for (i, row) in p.chunks_mut(t).enumerate() {
                softmax_in_place(&mut row[..=i]);
                row[i + 1..].fill(0.0);
            }
            gemm_view(1.0, p, square, &vd[off..], head, 0.0, &mut out[off..], head);
        }
    }
    Ok((Tensor::from_parts(vec![batch * t, d], out), probs))
}

/// Gradients of [`causal_attention`]; accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn causal_attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    d: usize,
    shape: AttentionShape,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let AttentionShape {
        batch,
        seq_len: t,
        heads,
    } = shape;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let head = View {
        rows: t,
        cols: dh,
        rs: d,
        cs: 1,
    };
    let square = View {
        rows: t,
        cols: t,
        rs: t,
        cs: 1,
    };
    let mut ds = vec![0.0; t * t];
    for b in 0..batch {
        for h in 0..heads {
            let off = b * t * d + h * dh;
            let pbase = (b * heads + h) * t * t;
            let p = &probs[pbase..pbase + t * t];
            let dout_h = &dout[off..];
            // dV += Pᵀ dO
            gemm_view(1.0, p, square.t(), dout_h, head, 1.0, &mut dv[off..], head);
            // dP = dO Vᵀ, then dS = P ∘ (dP − rowsum(P ∘ dP)) · scale.
            gemm_view(1.0, dout_h, head, &v[off..], head.t(), 0.0, &mut ds, square);
            for (i, (dsr, pr)) in ds.chunks_mut(t).zip(p.chunks(t)).enumerate() {
                let w: f64 = dsr[..=i].iter().zip(&pr[..=i]).map(|(a, b)| a * b).sum();
                for (x, &pv) in dsr[..=i].iter_mut().zip(&pr[..=i]) {
                    *x = pv * (*x - w) * scale;
                }
                dsr[i + 1..].fill(0.0);
            }
            gemm_view(1.0, &ds, square, &k[off..], head, 1.0, &mut dq[off..], head);
            gemm_view(1.0, &ds, square.t(), &q[off..], head, 1.0, &mut dk[off..], head);
        }
    }
}

/// Projects selected rows of `h` to scalars: `out[i] = h[rows[i]] · w + b`.
pub fn readout(h: &Tensor, weight: &Tensor, bias: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let (n, d) = h.dims2("readout")?;
    if weight.len() != d || bias.len() != 1 {
        return Err(mismatch(
            "readout",
            format!(
                "hidden width {d}, weight {:?}, bias {:?}",
                weight.shape(),
                bias.shape()
            ),
        ));
    }
    if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
        return Err(mismatch("readout", format!("row {bad} out of {n}")));
    }
    let b = bias.data()[0];
    let out = rows
        .iter()
        .map(|&r| dot(&h.data()[r * d..(r + 1) * d], weight.data()) + b)
        .collect();
    Ok(Tensor::from_parts(vec![rows.len()], out))
}

/// Mean squared difference between `pred` and a constant target.
pub fn mse(pred: &Tensor, target: &[f64]) -> Result<Tensor> {
    if pred.len() != target.len() {
        return Err(mismatch(
            "mse",
            format!("{} predictions vs {} targets", pred.len(), target.len()),
        ));
    }
    if target.is_empty() {
        return Err(KernelError::Empty { op: "mse" });
    }
    if target.iter().any(|v| !v.is_finite()) {
        return Err(KernelError::NonFinite { op: "mse" });
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(Tensor::scalar(s / target.len() as f64))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let a = Tensor::from_fn(3, 2, |r, c| (r + 2 * c) as f64 - 1.5);
        let i = Tensor::identity(3);
        assert_eq!(matmul(&i, &a).unwrap(), a);
    }

    #[test]
    fn matmul_shape_error_names_dims() {
        let a = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &a).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("2x3 times 2x3"), "{msg}");
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let x = Tensor::zeros(&[1, 3]);
        let y = softmax_rows(&x).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layernorm_normalizes_row() {
        // mean 2, variance 2/3; (x - 2) / sqrt(2/3 + 1e-5)
        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let g = Tensor::filled(&[3], 1.0);
        let b = Tensor::zeros(&[3]);
        let (y, _) = layernorm(&x, &g, &b, 1e-5).unwrap();
        let s = (2.0f64 / 3.0 + 1e-5).sqrt();
        let expected = [-1.0 / s, 0.0, 1.0 / s];
        for (a, e) in y.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
        let mean: f64 = y.data().iter().sum::<f64>() / 3.0;
        let var: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layernorm_rejects_nonpositive_eps() {
        let x = Tensor::zeros(&[1, 2]);
        let g = Tensor::zeros(&[2]);
        assert!(layernorm(&x, &g, &g, 0.0).is_err());
    }

    #[test]
    fn attention_first_position_copies_value() {
        let q = Tensor::from_fn(2, 2, |r, c| (r + c) as f64);
        let k = q.clone();
        let v = Tensor::from_fn(2, 2, |r, c| 10.0 * r as f64 + c as f64);
        let shape = AttentionShape {
            batch: 1,
            seq_len: 2,
            heads: 1,
        };
        let (out, probs) = causal_attention(&q, &k, &v, shape).unwrap();
        assert_eq!(out.row(0), v.row(0));
        assert_eq!(probs[0], 1.0);
        assert_eq!(probs[1], 0.0);
        assert!((probs[2] + probs[3] - 1.0).abs() < 1e-15);
    }
}
