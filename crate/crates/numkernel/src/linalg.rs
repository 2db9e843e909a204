// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense linear algebra: one-sided Jacobi SVD, Householder QR, least squares
//! and the Moore-Penrose pseudo-inverse.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{mismatch, KernelError, Result};
use crate::ops::gemm;
use crate::tensor::Tensor;

/// Singular values below `PINV_RTOL * σ₁` are treated as zero.
pub const PINV_RTOL: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_TOL: f64 = 1e-15;

/// Thin singular value decomposition `A = U · diag(σ) · Vᵀ`.
///
/// For an `m×n` input with `r = min(m, n)`, `u` is `m×r`, `v` is `n×r` and
/// `singular_values` holds `r` non-negative values in descending order.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Tensor,
    pub singular_values: Vec<f64>,
    pub v: Tensor,
}

impl SvdResult {
    /// Recomputes `U · diag(σ) · Vᵀ`.
    pub fn reconstruct(&self) -> Tensor {
        let (m, r) = (self.u.rows(), self.u.cols());
        let n = self.v.rows();
        let mut us = self.u.data().to_vec();
        for row in us.chunks_mut(r) {
            for (x, s) in row.iter_mut().zip(&self.singular_values) {
                *x *= s;
            }
        }
        let mut out = vec![0.0; m * n];
        gemm(m, r, n, 1.0, &us, false, self.v.data(), true, 0.0, &mut out);
        Tensor::from_parts(vec![m, n], out)
    }
}

pub fn svd(a: &Tensor) -> Result<SvdResult> {
    let (m, n) = a.dims2("svd")?;
    if !a.is_finite() {
        return Err(KernelError::NonFinite { op: "svd" });
    }
    if m == 0 || n == 0 {
        return Err(KernelError::Empty { op: "svd" });
    }
    if m >= n {
        Ok(jacobi_tall(a))
    } else {
        let t = jacobi_tall(&a.transpose());
        Ok(SvdResult {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        })
    }
}

/// One-sided (Hestenes) Jacobi on an `m×n` matrix with `m ≥ n`.
fn jacobi_tall(a: &Tensor) -> SvdResult {
    let (m, n) = (a.rows(), a.cols());
    // Column-major working copies.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for i in 0..m {
                        al += cp[i] * cp[i];
                        be += cq[i] * cq[i];
                        ga += cp[i] * cq[i];
                    }
                    (al, be, ga)
                };
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta == 0.0 {
                    1.0
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<(f64, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (c.iter().map(|v| v * v).sum::<f64>().sqrt(), j))
        .collect();
    sigma.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let smax = sigma[0].0;
    let floor = smax * (m.max(n) as f64) * f64::EPSILON;
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut singular_values = Vec::with_capacity(n);
    let mut vordered: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (k, &(s, j)) in sigma.iter().enumerate() {
        if s > floor && s > 0.0 {
            ucols.push(cols[j].iter().map(|v| v / s).collect());
            singular_values.push(s);
        } else {
            ucols.push(vec![0.0; m]);
            singular_values.push(0.0);
            deficient.push(k);
        }
        vordered.push(vcols[j].clone());
    }
    complete_orthonormal(&mut ucols, &deficient, m);

    let u = Tensor::from_fn(m, n, |i, j| ucols[j][i]);
    let v = Tensor::from_fn(n, n, |i, j| vordered[j][i]);
    SvdResult {
        u,
        singular_values,
        v,
    }
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Replaces the columns listed in `missing` with unit vectors orthogonal to
/// every other column, via Gram-Schmidt against the standard basis.
fn complete_orthonormal(cols: &mut [Vec<f64>], missing: &[usize], m: usize) {
    let mut candidate = 0;
    for &k in missing {
        while candidate < m {
            let mut v = vec![0.0; m];
            v[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (j, c) in cols.iter().enumerate() {
                    if j == k || (missing.contains(&j) && c.iter().all(|x| *x == 0.0)) {
                        continue;
                    }
                    let proj: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                    for (x, y) in v.iter_mut().zip(c) {
                        *x -= proj * y;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                cols[k] = v.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Moore-Penrose pseudo-inverse with relative singular-value cutoff `rtol`.
pub fn pseudo_inverse(a: &Tensor, rtol: f64) -> Result<Tensor> {
    let (m, n) = a.dims2("pseudo_inverse")?;
    let s = svd(a)?;
    let r = s.singular_values.len();
    let cutoff = rtol * s.singular_values[0];
    // A⁺ = V · diag(1/σ) · Uᵀ
    let mut vs = s.v.data().to_vec();
    for row in vs.chunks_mut(r) {
        for (x, &sv) in row.iter_mut().zip(&s.singular_values) {
            *x = if sv > cutoff && sv > 0.0 { *x / sv } else { 0.0 };
        }
    }
    let mut out = vec![0.0; n * m];
    gemm(n, r, m, 1.0, &vs, false, s.u.data(), true, 0.0, &mut out);
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Minimum-norm least-squares map `W` (`p×d`) minimising `Σᵢ ‖W xᵢ − yᵢ‖²`,
/// where the rows of `x` (`n×d`) and `y` (`n×p`) are the samples `xᵢ`, `yᵢ`.
pub fn least_squares(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2("least_squares")?;
    let (ny, p) = y.dims2("least_squares")?;
    if n == 0 || d == 0 {
        return Err(KernelError::Empty { op: "least_squares" });
    }
    if ny != n {
        return Err(mismatch(
            "least_squares",
            format!("{n} input rows vs {ny} target rows"),
        ));
    }
    if !y.is_finite() {
        return Err(KernelError::NonFinite { op: "least_squares" });
    }
    // Wᵀ = X⁺ Y
    let xp = pseudo_inverse(x, PINV_RTOL)?;
    let mut wt = vec![0.0; d * p];
    gemm(d, n, p, 1.0, xp.data(), false, y.data(), false, 0.0, &mut wt);
    Ok(Tensor::from_parts(vec![d, p], wt).transpose())
}

/// Thin Householder QR of an `m×n` matrix with `m ≥ n`: `A = Q R`.
pub fn qr(a: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, n) = a.dims2("qr")?;
    if m < n {
        return Err(mismatch("qr", format!("needs rows >= cols, got {m}x{n}")));
    }
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut v: Vec<f64> = (k..m).map(|i| r.get(i, k)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            reflectors.push(vec![0.0; m - k]);
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x /= vnorm;
        }
        for j in k..n {
            let dotv: f64 = (k..m).map(|i| v[i - k] * r.get(i, j)).sum();
            for i in k..m {
                let val = r.get(i, j) - 2.0 * v[i - k] * dotv;
                r.set(i, j, val);
            }
        }
        reflectors.push(v);
    }
    // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I.
    let mut q = Tensor::from_fn(m, n, |i, j| if i == j { 1.0 } else { 0.0 });
    for k in (0..n).rev() {
        let v = &reflectors[k];
        for j in 0..n {
            let dotv: f64 = (k..m).map(|i| v[i - k] * q.get(i, j)).sum();
            if dotv == 0.0 {
                continue;
            }
            for i in k..m {
                let val = q.get(i, j) - 2.0 * v[i - k] * dotv;
                q.set(i, j, val);
            }
        }
    }
    let r = Tensor::from_fn(n, n, |i, j| if j >= i { r.get(i, j) } else { 0.0 });
    Ok((q, r))
}

/// Gaussian matrix with entries `N(0, std²)` drawn from `rng`.
pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl rand::Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Haar-distributed orthogonal `d×d` matrix, deterministic in `seed`.
///
/// QR of a seeded Gaussian matrix, with column signs fixed so that `R` has a
/// non-negative diagonal.
pub fn random_orthogonal(d: usize, seed: u64) -> Result<Tensor> {
    if d == 0 {
        return Err(KernelError::Empty {
            op: "random_orthogonal",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = gaussian_matrix(d, d, 1.0, &mut rng);
    let (mut q, r) = qr(&g)?;
    for j in 0..d {
        if r.get(j, j) < 0.0 {
            for i in 0..d {
                let v = -q.get(i, j);
                q.set(i, j, v);
            }
        }
    }
    Ok(q)
}
