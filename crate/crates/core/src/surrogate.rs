// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer linear surrogates `W ≈ argmin Σ ‖W hₗ − hₗ₊₁‖²` and their
//! diagnostics, plus the maps injected in intervention experiments.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};
use talelab_numkernel::{least_squares, pseudo_inverse, random_orthogonal, svd, Tensor, PINV_RTOL};

use crate::error::{invalid, io_err, Result};
use crate::geometry::median;
use crate::model::ForwardTrace;

/// Which token states become regression samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenPolicy {
    #[default]
    FinalToken,
    AllTokens,
}

/// Input/output states of layer `layer`: rows of `x` are `h_layer`, rows of
/// `y` the matching `h_{layer+1}`.
pub fn collect_io_pairs(
    traces: &[ForwardTrace],
    layer: usize,
    policy: TokenPolicy,
) -> Result<(Tensor, Tensor)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut d = None;
    for t in traces {
        if layer + 1 >= t.hidden.len() {
            return Err(invalid(
                "io pairs",
                format!("layer {layer} out of range for {} layers", t.n_layers()),
            ));
        }
        let width = t.hidden[layer].cols();
        if *d.get_or_insert(width) != width {
            return Err(invalid("io pairs", "traces differ in width"));
        }
        let positions: Vec<usize> = match policy {
            TokenPolicy::FinalToken => vec![t.seq_len() - 1],
            TokenPolicy::AllTokens => (0..t.seq_len()).collect(),
        };
        for p in positions {
            xs.extend_from_slice(t.state(layer, p));
            ys.extend_from_slice(t.state(layer + 1, p));
        }
    }
    let d = d.ok_or_else(|| invalid("io pairs", "empty selection"))?;
    let n = xs.len() / d;
    Ok((Tensor::new(vec![n, d], xs)?, Tensor::new(vec![n, d], ys)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateMeta {
    pub layer: usize,
    pub dataset: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateFit {
    pub meta: SurrogateMeta,
    pub w: Tensor,
    /// `‖X Wᵀ − Y‖_F / ‖Y‖_F`.
    pub fit_residual: f64,
    /// Singular values of `W − I`, descending.
    pub spectrum: Vec<f64>,
    pub stable_rank: f64,
    /// `‖W x‖ / ‖x‖` per non-zero sample.
    pub gains: Vec<f64>,
    pub median_gain: f64,
    /// `‖y‖ / ‖x‖` per non-zero sample, from the layer itself.
    pub raw_gains: Vec<f64>,
    pub median_raw_gain: f64,
    /// 5th and 95th percentiles of `gains`.
    pub gain_spread: (f64, f64),
    pub one_sidedness: f64,
    pub ridge: bool,
}

/// Singular values below this fraction of `max(1, ‖W‖_F)` count as zero
/// when computing the stable rank.
pub const SPECTRUM_ZERO_RTOL: f64 = 1e-10;

/// Gains within this relative distance of 1 count as neither expanding nor
/// contracting.
pub const GAIN_TIE_RTOL: f64 = 1e-9;

/// `‖A‖_F² / σ₁²` from descending singular values; the zero matrix maps to 0.
pub fn stable_rank(singular_values: &[f64], zero_tol: f64) -> f64 {
    match singular_values.first() {
        Some(&s1) if s1 > zero_tol => {
            singular_values.iter().map(|s| s * s).sum::<f64>() / (s1 * s1)
        }
        _ => 0.0,
    }
}

/// `(P(g>1) − P(g<1)) / (P(g>1) + P(g<1))`, ignoring gains equal to 1; zero
/// when nothing expands or contracts.
pub fn one_sidedness(gains: &[f64]) -> f64 {
    one_sidedness_with_tol(gains, 0.0)
}

pub fn one_sidedness_with_tol(gains: &[f64], rtol: f64) -> f64 {
    let up = gains.iter().filter(|&&g| g > 1.0 + rtol).count() as f64;
    let down = gains.iter().filter(|&&g| g < 1.0 - rtol).count() as f64;
    if up + down == 0.0 {
        0.0
    } else {
        (up - down) / (up + down)
    }
}

/// Linear-interpolated percentile, `q` in `[0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn row_norm(t: &Tensor, r: usize) -> f64 {
    t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖M xᵢ‖ / ‖xᵢ‖` over the non-zero rows of `x`.
pub fn gains_of(m: &Tensor, x: &Tensor) -> Result<Vec<f64>> {
    let mx = x.matmul(&m.transpose())?;
    Ok((0..x.rows())
        .filter_map(|r| {
            let nx = row_norm(x, r);
            (nx > 0.0).then(|| row_norm(&mx, r) / nx)
        })
        .collect())
}

/// Least-squares fit with diagnostics. Below `d` samples a small ridge term
/// `1e-8 · tr(XᵀX)/d` is added.
pub fn fit(x: &Tensor, y: &Tensor, meta: SurrogateMeta) -> Result<SurrogateFit> {
    let (n, d) = x.dims2("surrogate fit")?;
    if y.shape() != x.shape() {
        return Err(invalid(
            "surrogate fit",
            format!("x {:?} vs y {:?}", x.shape(), y.shape()),
        ));
    }
    if x.data().iter().all(|&v| v == 0.0) {
        return Err(invalid("surrogate fit", "all inputs are zero"));
    }
    let ridge = n < d;
    let w = if ridge {
        let gram_trace: f64 = x.data().iter().map(|v| v * v).sum();
        let lambda = 1e-8 * gram_trace / d as f64;
        let s = lambda.sqrt();
        let mut xa = x.data().to_vec();
        let mut ya = y.data().to_vec();
        for i in 0..d {
            xa.extend((0..d).map(|j| if i == j { s } else { 0.0 }));
            ya.extend(std::iter::repeat_n(0.0, d));
        }
        least_squares(
            &Tensor::new(vec![n + d, d], xa)?,
            &Tensor::new(vec![n + d, d], ya)?,
        )?
    } else {
        least_squares(x, y)?
    };
    let pred = x.matmul(&w.transpose())?;
    let ynorm = y.frobenius_norm();
    let resid = pred.sub(y)?.frobenius_norm();
    let fit_residual = if ynorm > 0.0 { resid / ynorm } else { resid };

    let update = w.sub(&Tensor::identity(d))?;
    let spectrum = svd(&update)?.singular_values;
    let zero_tol = SPECTRUM_ZERO_RTOL * w.frobenius_norm().max(1.0);
    let sr = stable_rank(&spectrum, zero_tol);

    let gains = gains_of(&w, x)?;
    let raw_gains: Vec<f64> = (0..n)
        .filter_map(|r| {
            let nx = row_norm(x, r);
            (nx > 0.0).then(|| row_norm(y, r) / nx)
        })
        .collect();
    Ok(SurrogateFit {
        meta,
        fit_residual,
        stable_rank: sr,
        median_gain: median(&gains).unwrap_or(f64::NAN),
        median_raw_gain: median(&raw_gains).unwrap_or(f64::NAN),
        gain_spread: (percentile(&gains, 0.05), percentile(&gains, 0.95)),
        one_sidedness: one_sidedness_with_tol(&gains, GAIN_TIE_RTOL),
        spectrum,
        gains,
        raw_gains,
        ridge,
        w,
    })
}

/// Fits the surrogate of `layer` from traces.
pub fn fit_layer(
    traces: &[ForwardTrace],
    layer: usize,
    policy: TokenPolicy,
    dataset: &str,
) -> Result<SurrogateFit> {
    let (x, y) = collect_io_pairs(traces, layer, policy)?;
    fit(
        &x,
        &y,
        SurrogateMeta {
            layer,
            dataset: dataset.to_string(),
        },
    )
}

/// Writes `layer,dataset,median_gain,stable_rank,top_5_singular_values,S,fit_residual`.
/// The singular values are `;`-separated.
pub fn write_surrogate_csv(path: impl AsRef<Path>, fits: &[SurrogateFit]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "layer",
        "dataset",
        "median_gain",
        "stable_rank",
        "top_5_singular_values",
        "S",
        "fit_residual",
    ])?;
    for f in fits {
        let top: Vec<String> = f.spectrum.iter().take(5).map(|s| format!("{s:e}")).collect();
        w.write_record([
            f.meta.layer.to_string(),
            f.meta.dataset.clone(),
            format!("{:e}", f.median_gain),
            format!("{:e}", f.stable_rank),
            top.join(";"),
            format!("{:e}", f.one_sidedness),
            format!("{:e}", f.fit_residual),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    InverseSurrogate,
    RandomRotation,
    RandomTriangular,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionMap {
    pub kind: MapKind,
    pub matrix: Tensor,
    /// Median `‖M x‖/‖x‖` on the calibration sample, when one was given.
    pub calibration_median_gain: Option<f64>,
    pub warning: Option<String>,
}

/// Default tolerance on the controls' median gain around 1.
pub const NORM_BUDGET: f64 = 0.10;

/// Pseudo-inverse of the fitted map, with a warning when `W` is singular at
/// the default cutoff.
pub fn inverse_map(fit: &SurrogateFit) -> Result<InterventionMap> {
    let s = svd(&fit.w)?.singular_values;
    let smax = s.first().copied().unwrap_or(0.0);
    let smin = s.last().copied().unwrap_or(0.0);
    let warning = (smin <= PINV_RTOL * smax).then(|| {
        format!(
            "layer {} surrogate is singular (σ_min/σ_max = {:e}); using the pseudo-inverse",
            fit.meta.layer,
            if smax > 0.0 { smin / smax } else { 0.0 }
        )
    });
    Ok(InterventionMap {
        kind: MapKind::InverseSurrogate,
        matrix: pseudo_inverse(&fit.w, PINV_RTOL)?,
        calibration_median_gain: None,
        warning,
    })
}

/// Unit-diagonal upper-triangular matrix with `N(0, 1/d)` entries above the
/// diagonal, scaled so its median gain on `calibration` rows is 1.
pub fn random_triangular(d: usize, seed: u64, calibration: &Tensor) -> Result<Tensor> {
    if d == 0 {
        return Err(invalid("triangular map", "dimension must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / (d as f64).sqrt();
    let mut m = Tensor::identity(d);
    for i in 0..d {
        for j in i + 1..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            m.set(i, j, std * z);
        }
    }
    let g = median(&gains_of(&m, calibration)?)
        .ok_or_else(|| invalid("triangular map", "calibration sample has no non-zero rows"))?;
    Ok(m.scaled(1.0 / g))
}

/// Builds one of the injected maps. The inverse needs `fit`; the random
/// controls need `calibration` states (rows) when a norm check is wanted.
pub fn build_intervention_map(
    kind: MapKind,
    fit: Option<&SurrogateFit>,
    d: usize,
    seed: u64,
    calibration: Option<&Tensor>,
    norm_budget: f64,
) -> Result<InterventionMap> {
    let mut map = match kind {
        MapKind::InverseSurrogate => {
            let f = fit.ok_or_else(|| invalid("intervention map", "inverse needs a surrogate fit"))?;
            inverse_map(f)?
        }
        MapKind::RandomRotation => InterventionMap {
            kind,
            matrix: random_orthogonal(d, seed)?,
            calibration_median_gain: None,
            warning: None,
        },
        MapKind::RandomTriangular => {
            let cal = calibration
                .ok_or_else(|| invalid("intervention map", "triangular map needs calibration states"))?;
            InterventionMap {
                kind,
                matrix: random_triangular(d, seed, cal)?,
                calibration_median_gain: None,
                warning: None,
            }
        }
    };
    if let Some(cal) = calibration {
        let g = median(&gains_of(&map.matrix, cal)?).unwrap_or(f64::NAN);
        map.calibration_median_gain = Some(g);
        if kind != MapKind::InverseSurrogate && !((g - 1.0).abs() <= norm_budget) {
            map.warning = Some(format!("median gain {g} outside 1 ± {norm_budget}"));
        }
    }
    Ok(map)
}
