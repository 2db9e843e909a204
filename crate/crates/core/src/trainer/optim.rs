// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adam, Newton–Schulz orthogonalization and Muon.

use serde::{Deserialize, Serialize};
use talelab_numkernel::Tensor;

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for a list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { m, v, t: 0 }
    }

    pub fn for_params<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self::new(params.into_iter().map(Tensor::len))
    }
}

/// One bias-corrected Adam update of every parameter in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(invalid(
            "adam step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != p.len() {
            return Err(invalid(
                "adam step",
                format!("slot {i}: param {:?}, grad {:?}", p.shape(), g.shape()),
            ));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Odd quintic `p(s) = a s + b s³ + c s⁵` applied to singular values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewtonSchulz {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub iters: usize,
}

impl NewtonSchulz {
    /// `(15/8, -10/8, 3/8)`: fixed point at 1 with `p'(1) = p''(1) = 0`, so
    /// singular values in `(0, 1]` converge to 1.
    pub const CONVERGENT: Self = Self {
        a: 15.0 / 8.0,
        b: -10.0 / 8.0,
        c: 3.0 / 8.0,
        iters: 5,
    };

    /// Steeper coefficients that inflate small singular values faster but
    /// settle in a band around 1 instead of converging.
    pub const AGGRESSIVE: Self = Self {
        a: 3.4445,
        b: -4.7750,
        c: 2.0315,
        iters: 5,
    };

    pub fn with_iters(self, iters: usize) -> Self {
        Self { iters, ..self }
    }
}

impl Default for NewtonSchulz {
    fn default() -> Self {
        Self::CONVERGENT
    }
}

/// Approximates the polar factor `U Vᵀ` of `m` after scaling it to unit
/// Frobenius norm.
pub fn newton_schulz_orthogonalize(m: &Tensor, ns: &NewtonSchulz) -> Result<Tensor> {
    let (rows, cols) = m.dims2("newton_schulz")?;
    let norm = m.frobenius_norm();
    if norm == 0.0 {
        return Err(invalid("newton-schulz input", "zero matrix has no polar factor"));
    }
    // Iterate on the wide orientation so the Gram matrix is the small one.
    let tall = rows > cols;
    let mut x = if tall { m.transpose() } else { m.clone() };
    x = x.scaled(1.0 / norm);
    for _ in 0..ns.iters {
        let a = x.matmul(&x.transpose())?;
        let a2 = a.matmul(&a)?;
        let poly = a.scaled(ns.b).add(&a2.scaled(ns.c))?;
        x = x.scaled(ns.a).add(&poly.matmul(&x)?)?;
    }
    Ok(if tall { x.transpose() } else { x })
}

/// `‖G − I‖_F` for the Gram matrix on the smaller side of `o`.
pub fn orthogonality_error(o: &Tensor) -> Result<f64> {
    let (rows, cols) = o.dims2("orthogonality_error")?;
    let gram = if rows >= cols {
        o.transpose().matmul(o)?
    } else {
        o.matmul(&o.transpose())?
    };
    let n = gram.rows();
    Ok(gram.sub(&Tensor::identity(n))?.frobenius_norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MuonConfig {
    pub momentum: f64,
    pub nesterov: bool,
    pub newton_schulz: NewtonSchulz,
}

impl Default for MuonConfig {
    fn default() -> Self {
        Self {
            momentum: 0.95,
            nesterov: true,
            newton_schulz: NewtonSchulz::default(),
        }
    }
}

/// Momentum buffers for the matrices handled by Muon.
#[derive(Debug, Clone, PartialEq)]
pub struct MuonState {
    pub momentum: Vec<Vec<f64>>,
}

impl MuonState {
    pub fn for_params<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self {
            momentum: params.into_iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// The orthogonalized direction Muon would apply for one matrix, updating its
/// momentum buffer. A zero direction stays zero.
pub fn muon_direction(grad: &Tensor, buf: &mut [f64], cfg: &MuonConfig) -> Result<Tensor> {
    let (rows, cols) = grad.dims2("muon")?;
    if buf.len() != grad.len() {
        return Err(invalid("muon state", "momentum buffer size mismatch"));
    }
    for (b, g) in buf.iter_mut().zip(grad.data()) {
        *b = cfg.momentum * *b + g;
    }
    let data: Vec<f64> = if cfg.nesterov {
        grad.data()
            .iter()
            .zip(buf.iter())
            .map(|(g, b)| g + cfg.momentum * b)
            .collect()
    } else {
        buf.to_vec()
    };
    let update = Tensor::new(vec![rows, cols], data)?;
    if update.frobenius_norm() == 0.0 {
        return Ok(update);
    }
    let o = newton_schulz_orthogonalize(&update, &cfg.newton_schulz)?;
    // Keeps the per-entry update size comparable across aspect ratios.
    let scale = (rows as f64 / cols as f64).max(1.0).sqrt();
    Ok(o.scaled(scale))
}

/// One Muon update of 2-D matrices in place.
pub fn muon_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut MuonState,
    lr: f64,
    cfg: &MuonConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.momentum.len() {
        return Err(invalid("muon step", "params, grads and state differ in length"));
    }
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(invalid(
                "muon step",
                format!("slot {i}: param {:?}, grad {:?}", p.shape(), g.shape()),
            ));
        }
        let dir = muon_direction(g, &mut state.momentum[i], cfg)?;
        for (w, d) in p.data_mut().iter_mut().zip(dir.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use talelab_numkernel::{random_orthogonal, svd};

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut p = Tensor::vector(vec![0.3, -1.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut st = AdamState::new([2]);
        adam_step(&mut [&mut p], &[&g], &mut st, 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(p.data(), &[0.3, -1.0]);
    }

    #[test]
    fn adam_first_step_by_hand() {
        // m = 0.1, v = 0.001; m̂ = 1, v̂ = 1; Δ = -lr / (1 + ε).
        let lr = 1e-4;
        let mut p = Tensor::scalar(2.0);
        let g = Tensor::scalar(1.0);
        let mut st = AdamState::new([1]);
        adam_step(&mut [&mut p], &[&g], &mut st, lr, &AdamConfig::default()).unwrap();
        let m = 0.1_f64;
        let v = 0.001_f64;
        let expected = 2.0 - lr * (m / 0.1) / ((v / (1.0 - 0.999_f64)).sqrt() + 1e-8);
        assert_eq!(p.data()[0], expected);
        assert!((p.data()[0] - (2.0 - lr / (1.0 + 1e-8))).abs() < 1e-15);
        assert!(st.v[0][0] >= 0.0);
    }

    #[test]
    fn ns_orthogonal_fixed_point() {
        let q = random_orthogonal(6, 3).unwrap();
        let o = newton_schulz_orthogonalize(&q, &NewtonSchulz::default()).unwrap();
        assert!(o.max_abs_diff(&q) < 1e-6, "{}", o.max_abs_diff(&q));
    }

    #[test]
    fn ns_positive_diagonal_goes_to_identity() {
        let o = newton_schulz_orthogonalize(&Tensor::diag(&[2.0, 0.5]), &NewtonSchulz::default())
            .unwrap();
        assert!(o.max_abs_diff(&Tensor::identity(2)) < 1e-4);
    }

    #[test]
    fn ns_recovers_rotation_from_polar_decomposition() {
        let t = 0.7_f64;
        let r = Tensor::from_rows(&[vec![t.cos(), -t.sin()], vec![t.sin(), t.cos()]]).unwrap();
        let m = r.matmul(&Tensor::diag(&[3.0, 1.0])).unwrap();
        let o = newton_schulz_orthogonalize(&m, &NewtonSchulz::default()).unwrap();
        assert!(o.max_abs_diff(&r) < 1e-4);
    }

    #[test]
    fn ns_rejects_zero() {
        assert!(newton_schulz_orthogonalize(&Tensor::zeros(&[2, 2]), &NewtonSchulz::default()).is_err());
    }

    #[test]
    fn ns_error_decreases_with_iterations() {
        let m = Tensor::from_fn(4, 4, |r, c| if r == c { 1.0 + r as f64 } else { 0.1 * (r + 2 * c) as f64 });
        let mut last = f64::INFINITY;
        for it in 1..8 {
            let e = orthogonality_error(
                &newton_schulz_orthogonalize(&m, &NewtonSchulz::default().with_iters(it)).unwrap(),
            )
            .unwrap();
            assert!(e < last, "iters {it}: {e} !< {last}");
            last = e;
        }
    }

    #[test]
    fn muon_zero_grad_no_change() {
        let mut p = Tensor::from_fn(2, 3, |r, c| (r + c) as f64);
        let before = p.clone();
        let g = Tensor::zeros(&[2, 3]);
        let mut st = MuonState::for_params([&p]);
        muon_step(&mut [&mut p], &[&g], &mut st, 0.02, &MuonConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn muon_one_step_matches_polar_pipeline() {
        let g = Tensor::from_rows(&[vec![2.0, 0.3], vec![-0.4, 1.0]]).unwrap();
        let cfg = MuonConfig::default();
        let mut buf = vec![0.0; 4];
        let dir = muon_direction(&g, &mut buf, &cfg).unwrap();
        // First step: buffer = g, Nesterov update = (1 + μ) g; its polar factor
        // equals that of g.
        assert_eq!(buf, g.data());
        let s = svd(&g).unwrap();
        let polar = s.u.matmul(&s.v.transpose()).unwrap();
        assert!(dir.max_abs_diff(&polar) < 1e-4, "{}", dir.max_abs_diff(&polar));
        assert!(orthogonality_error(&dir).unwrap() < 1e-2);
    }
}
