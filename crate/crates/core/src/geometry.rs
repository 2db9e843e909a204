// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layerwise representation statistics and the ID/OOD discrepancy.
//!
//! For every prompt and layer boundary, distances run from the final token's
//! hidden state to earlier token states. Medians and means are taken over
//! positions and then averaged over prompts. Norms, pairwise distances and the
//! covariance summary use the final-token states across prompts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Result};
use crate::model::ForwardTrace;

/// Which earlier positions the final token is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistancePositions {
    #[default]
    AllPreceding,
    /// Only the label tokens `y₁ … y_k` (odd positions).
    PrecedingY,
}

impl DistancePositions {
    fn positions(self, seq_len: usize) -> Vec<usize> {
        let last = seq_len - 1;
        match self {
            Self::AllPreceding => (0..last).collect(),
            Self::PrecedingY => (1..last).step_by(2).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub median_dist_l1: f64,
    pub median_dist_l2: f64,
    pub mean_dist_l1: f64,
    pub mean_dist_l2: f64,
    pub last_token_norm_mean: f64,
    pub pairwise_dist_mean: f64,
    /// Per-prompt variance of the L2 distances, averaged over prompts.
    pub dist_variance: f64,
    /// Trace of the covariance of final-token states across prompts.
    pub cov_trace: f64,
    /// Largest covariance eigenvalue (power iteration).
    pub cov_top_eigenvalue: f64,
}

/// Names of the scalar statistics, in CSV order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    MedianDistL1,
    MedianDistL2,
    MeanDistL1,
    MeanDistL2,
    LastTokenNormMean,
    PairwiseDistMean,
    DistVariance,
    CovTrace,
    CovTopEigenvalue,
}

impl Statistic {
    pub const ALL: [Statistic; 9] = [
        Self::MedianDistL1,
        Self::MedianDistL2,
        Self::MeanDistL1,
        Self::MeanDistL2,
        Self::LastTokenNormMean,
        Self::PairwiseDistMean,
        Self::DistVariance,
        Self::CovTrace,
        Self::CovTopEigenvalue,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::MedianDistL1 => "median_dist_l1",
            Self::MedianDistL2 => "median_dist_l2",
            Self::MeanDistL1 => "mean_dist_l1",
            Self::MeanDistL2 => "mean_dist_l2",
            Self::LastTokenNormMean => "last_token_norm_mean",
            Self::PairwiseDistMean => "pairwise_dist_mean",
            Self::DistVariance => "dist_variance",
            Self::CovTrace => "cov_trace",
            Self::CovTopEigenvalue => "cov_top_eigenvalue",
        }
    }
}

impl LayerStats {
    pub fn get(&self, s: Statistic) -> f64 {
        match s {
            Statistic::MedianDistL1 => self.median_dist_l1,
            Statistic::MedianDistL2 => self.median_dist_l2,
            Statistic::MeanDistL1 => self.mean_dist_l1,
            Statistic::MeanDistL2 => self.mean_dist_l2,
            Statistic::LastTokenNormMean => self.last_token_norm_mean,
            Statistic::PairwiseDistMean => self.pairwise_dist_mean,
            Statistic::DistVariance => self.dist_variance,
            Statistic::CovTrace => self.cov_trace,
            Statistic::CovTopEigenvalue => self.cov_top_eigenvalue,
        }
    }

    pub fn set(&mut self, s: Statistic, v: f64) {
        let slot = match s {
            Statistic::MedianDistL1 => &mut self.median_dist_l1,
            Statistic::MedianDistL2 => &mut self.median_dist_l2,
            Statistic::MeanDistL1 => &mut self.mean_dist_l1,
            Statistic::MeanDistL2 => &mut self.mean_dist_l2,
            Statistic::LastTokenNormMean => &mut self.last_token_norm_mean,
            Statistic::PairwiseDistMean => &mut self.pairwise_dist_mean,
            Statistic::DistVariance => &mut self.dist_variance,
            Statistic::CovTrace => &mut self.cov_trace,
            Statistic::CovTopEigenvalue => &mut self.cov_top_eigenvalue,
        };
        *slot = v;
    }
}

/// Identifies what a profile was computed from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileMeta {
    pub dataset: String,
    pub model_id: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    /// `n_layers + 1` entries; index 0 is the embedding output.
    pub layers: Vec<LayerStats>,
    pub n_prompts: usize,
    pub positions: DistancePositions,
    pub meta: ProfileMeta,
}

impl LayerProfile {
    pub fn n_boundaries(&self) -> usize {
        self.layers.len()
    }

    pub fn series(&self, s: Statistic) -> Vec<f64> {
        self.layers.iter().map(|l| l.get(s)).collect()
    }

    pub fn final_layer(&self) -> &LayerStats {
        self.layers.last().expect("profiles are non-empty")
    }

    /// Writes `layer,statistic,value,dataset,model_id,mask`, layer-major.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_profiles_csv(path, std::slice::from_ref(self))
    }
}

/// Writes several profiles into one long-format CSV.
pub fn write_profiles_csv(path: impl AsRef<Path>, profiles: &[LayerProfile]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "statistic", "value", "dataset", "model_id", "mask"])?;
    for p in profiles {
        for (l, stats) in p.layers.iter().enumerate() {
            for s in Statistic::ALL {
                w.write_record([
                    l.to_string(),
                    s.name().to_string(),
                    format!("{:e}", stats.get(s)),
                    p.meta.dataset.clone(),
                    p.meta.model_id.clone(),
                    p.meta.mask.clone(),
                ])?;
            }
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// `2/(N(N−1)) Σ_{i<j} ‖hᵢ − hⱼ‖₂`.
pub fn mean_pairwise_distance(states: &[&[f64]]) -> Result<f64> {
    let n = states.len();
    if n < 2 {
        return Err(invalid("pairwise distance", format!("needs at least 2 states, got {n}")));
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += l2(states[i], states[j]);
        }
    }
    Ok(2.0 * sum / (n * (n - 1)) as f64)
}

/// `(1/N) Σ ‖hᵢ‖₂`; zero for an empty set.
pub fn mean_last_token_norm(states: &[&[f64]]) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    states.iter().map(|s| norm(s)).sum::<f64>() / states.len() as f64
}

/// Trace and largest eigenvalue of the (population) covariance of `states`.
pub fn covariance_summary(states: &[&[f64]]) -> (f64, f64) {
    let n = states.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let d = states[0].len();
    let mut mu = vec![0.0; d];
    for s in states {
        for (m, v) in mu.iter_mut().zip(*s) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = states
        .iter()
        .map(|s| s.iter().zip(&mu).map(|(v, m)| v - m).collect())
        .collect();
    let trace = centered.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n as f64;
    if trace == 0.0 {
        return (0.0, 0.0);
    }
    // Power iteration on C = XᵀX / n without forming C.
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i as f64 * 0.618_033_988_7).fract()).collect();
    let mut lambda = 0.0;
    for _ in 0..500 {
        let mut w = vec![0.0; d];
        for c in &centered {
            let proj: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (wi, ci) in w.iter_mut().zip(c) {
                *wi += proj * ci / n as f64;
            }
        }
        let nw = norm(&w);
        if nw == 0.0 {
            return (trace, 0.0);
        }
        let next = nw / norm(&v);
        v = w.iter().map(|x| x / nw).collect();
        let done = (next - lambda).abs() <= 1e-12 * next;
        lambda = next;
        if done {
            break;
        }
    }
    (trace, lambda)
}

/// Builds the profile of a set of traces.
pub fn extract_profile(
    traces: &[ForwardTrace],
    positions: DistancePositions,
    meta: ProfileMeta,
) -> Result<LayerProfile> {
    let first = traces
        .first()
        .ok_or_else(|| invalid("profile", "needs at least one trace"))?;
    let boundaries = first.hidden.len();
    let d = first.hidden[0].cols();
    for t in traces {
        if t.hidden.len() != boundaries || t.hidden[0].cols() != d {
            return Err(invalid("profile", "traces come from different model shapes"));
        }
        if positions.positions(t.seq_len()).is_empty() {
            return Err(invalid(
                "profile",
                format!(
                    "a {}-token prompt has no earlier positions under {positions:?}",
                    t.seq_len()
                ),
            ));
        }
    }
    let n = traces.len() as f64;
    let mut layers = Vec::with_capacity(boundaries);
    for layer in 0..boundaries {
        let mut acc = [0.0; 5];
        for t in traces {
            let last = t.last_token(layer);
            let pos = positions.positions(t.seq_len());
            let d1: Vec<f64> = pos.iter().map(|&p| l1(last, t.state(layer, p))).collect();
            let d2: Vec<f64> = pos.iter().map(|&p| l2(last, t.state(layer, p))).collect();
            let m2 = mean(&d2);
            let var = d2.iter().map(|x| (x - m2) * (x - m2)).sum::<f64>() / d2.len() as f64;
            acc[0] += median(&d1).expect("non-empty");
            acc[1] += median(&d2).expect("non-empty");
            acc[2] += mean(&d1);
            acc[3] += m2;
            acc[4] += var;
        }
        let lasts: Vec<&[f64]> = traces.iter().map(|t| t.last_token(layer)).collect();
        let pairwise = if lasts.len() >= 2 {
            mean_pairwise_distance(&lasts)?
        } else {
            0.0
        };
        let (cov_trace, cov_top) = covariance_summary(&lasts);
        layers.push(LayerStats {
            median_dist_l1: acc[0] / n,
            median_dist_l2: acc[1] / n,
            mean_dist_l1: acc[2] / n,
            mean_dist_l2: acc[3] / n,
            dist_variance: acc[4] / n,
            last_token_norm_mean: mean_last_token_norm(&lasts),
            pairwise_dist_mean: pairwise,
            cov_trace,
            cov_top_eigenvalue: cov_top,
        });
    }
    Ok(LayerProfile {
        layers,
        n_prompts: traces.len(),
        positions,
        meta,
    })
}

/// Guard in the relative difference `|a − b| / ((a + b)/2 + ε)`.
pub const EPS_REL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub per_layer: Vec<f64>,
    pub aggregate: f64,
    pub weights: Vec<(Statistic, f64)>,
}

pub fn default_discrepancy_weights() -> Vec<(Statistic, f64)> {
    let w = 1.0 / 3.0;
    vec![
        (Statistic::MedianDistL2, w),
        (Statistic::LastTokenNormMean, w),
        (Statistic::DistVariance, w),
    ]
}

pub fn relative_difference(a: f64, b: f64) -> f64 {
    (a - b).abs() / ((a + b) / 2.0 + EPS_REL)
}

/// Per-layer weighted sum of relative differences; the aggregate is the mean
/// over layer boundaries.
pub fn discrepancy(
    p_ood: &LayerProfile,
    p_id: &LayerProfile,
    weights: &[(Statistic, f64)],
) -> Result<DiscrepancyReport> {
    if p_ood.layers.len() != p_id.layers.len() {
        return Err(invalid(
            "discrepancy",
            format!(
                "profiles have {} and {} layer boundaries",
                p_ood.layers.len(),
                p_id.layers.len()
            ),
        ));
    }
    if weights.iter().any(|(_, w)| !(*w >= 0.0)) {
        return Err(invalid("discrepancy", "weights must be non-negative"));
    }
    let per_layer: Vec<f64> = p_ood
        .layers
        .iter()
        .zip(&p_id.layers)
        .map(|(a, b)| {
            weights
                .iter()
                .map(|&(s, w)| w * relative_difference(a.get(s), b.get(s)))
                .sum()
        })
        .collect();
    let aggregate = mean(&per_layer);
    Ok(DiscrepancyReport {
        per_layer,
        aggregate,
        weights: weights.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use talelab_numkernel::Tensor;

    fn trace(rows: Vec<Vec<f64>>, boundaries: usize) -> ForwardTrace {
        let t = Tensor::from_rows(&rows).unwrap();
        ForwardTrace {
            hidden: vec![t; boundaries],
            predictions: vec![],
        }
    }

    #[test]
    fn pairwise_examples() {
        let a = [0.0, 0.0];
        let b = [3.0, 0.0];
        assert_eq!(mean_pairwise_distance(&[&a, &b]).unwrap(), 3.0);
        let p: Vec<[f64; 1]> = vec![[0.0], [1.0], [2.0]];
        let refs: Vec<&[f64]> = p.iter().map(|x| x.as_slice()).collect();
        assert!((mean_pairwise_distance(&refs).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(mean_pairwise_distance(&[&a, &a, &a]).unwrap(), 0.0);
        assert!(mean_pairwise_distance(&[&a]).is_err());
    }

    #[test]
    fn norm_examples() {
        assert_eq!(mean_last_token_norm(&[&[0.0, 0.0]]), 0.0);
        assert_eq!(mean_last_token_norm(&[&[1.0, 0.0], &[0.0, 1.0]]), 1.0);
        assert_eq!(mean_last_token_norm(&[&[3.0, 4.0]]), 5.0);
    }

    #[test]
    fn hand_geometry() {
        // Final token (3,4); earlier tokens (0,0) and (3,0).
        // L1: 7, 4 → median 5.5. L2: 5, 4 → median 4.5, variance 0.25.
        let p = extract_profile(
            &[trace(vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![3.0, 4.0]], 2)],
            DistancePositions::AllPreceding,
            ProfileMeta::default(),
        )
        .unwrap();
        let s = p.layers[1];
        assert_eq!(s.median_dist_l1, 5.5);
        assert_eq!(s.median_dist_l2, 4.5);
        assert_eq!(s.mean_dist_l2, 4.5);
        assert_eq!(s.dist_variance, 0.25);
        assert_eq!(s.last_token_norm_mean, 5.0);
        assert_eq!(s.pairwise_dist_mean, 0.0);
        // y-only: position 1 only.
        let p = extract_profile(
            &[trace(vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![3.0, 4.0]], 2)],
            DistancePositions::PrecedingY,
            ProfileMeta::default(),
        )
        .unwrap();
        assert_eq!(p.layers[0].median_dist_l2, 4.0);
    }

    #[test]
    fn equal_states_and_single_token() {
        let t = trace(vec![vec![1.0, 2.0]; 4], 3);
        let p = extract_profile(&[t.clone(), t], DistancePositions::AllPreceding, ProfileMeta::default())
            .unwrap();
        for s in &p.layers {
            assert_eq!(s.median_dist_l2, 0.0);
            assert_eq!(s.mean_dist_l1, 0.0);
            assert!((s.last_token_norm_mean - 5f64.sqrt()).abs() < 1e-15);
            assert_eq!(s.cov_trace, 0.0);
        }
        let single = trace(vec![vec![1.0, 2.0]], 2);
        assert!(extract_profile(&[single], DistancePositions::AllPreceding, ProfileMeta::default()).is_err());
        assert!(extract_profile(&[], DistancePositions::AllPreceding, ProfileMeta::default()).is_err());
    }

    #[test]
    fn covariance_of_known_cloud() {
        // Points ±(2,0) and ±(0,1): covariance diag(2, 0.5).
        let pts = [[2.0, 0.0], [-2.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let (tr, top) = covariance_summary(&refs);
        assert!((tr - 2.5).abs() < 1e-12);
        assert!((top - 2.0).abs() < 1e-9);
    }

    fn profile_with(values: &[[f64; 3]]) -> LayerProfile {
        let layers = values
            .iter()
            .map(|v| {
                let mut s = LayerStats {
                    median_dist_l1: 1.0,
                    median_dist_l2: 0.0,
                    mean_dist_l1: 1.0,
                    mean_dist_l2: 1.0,
                    last_token_norm_mean: 0.0,
                    pairwise_dist_mean: 1.0,
                    dist_variance: 0.0,
                    cov_trace: 1.0,
                    cov_top_eigenvalue: 1.0,
                };
                s.set(Statistic::MedianDistL2, v[0]);
                s.set(Statistic::LastTokenNormMean, v[1]);
                s.set(Statistic::DistVariance, v[2]);
                s
            })
            .collect();
        LayerProfile {
            layers,
            n_prompts: 1,
            positions: DistancePositions::AllPreceding,
            meta: ProfileMeta::default(),
        }
    }

    #[test]
    fn discrepancy_by_hand() {
        let id = profile_with(&[[1.0, 2.0, 3.0], [1.0, 1.0, 1.0]]);
        let ood = profile_with(&[[1.0, 2.0, 3.0], [3.0, 1.0, 2.0]]);
        let w = default_discrepancy_weights();
        let r = discrepancy(&ood, &id, &w).unwrap();
        assert_eq!(r.per_layer[0], 0.0);
        // |3−1|/2 = 1 and |2−1|/1.5 = 2/3, each weighted 1/3.
        let expected = (1.0 + 2.0 / 3.0) / 3.0;
        assert!((r.per_layer[1] - expected).abs() < 1e-9);
        assert!((r.aggregate - expected / 2.0).abs() < 1e-9);
        let back = discrepancy(&id, &ood, &w).unwrap();
        assert_eq!(back.per_layer, r.per_layer);
        let short = profile_with(&[[1.0, 1.0, 1.0]]);
        assert!(discrepancy(&short, &id, &w).is_err());
    }
}
