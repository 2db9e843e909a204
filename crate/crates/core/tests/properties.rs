// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use talelab::geometry::{
    default_discrepancy_weights, discrepancy, DistancePositions, LayerProfile, LayerStats, ProfileMeta,
    Statistic,
};
use talelab::harness::threshold_analysis;
use talelab::surrogate::{fit, inverse_map, SurrogateMeta};
use talelab::taskgen::{Distribution, TaskSpec};
use talelab::tale::{greedy_prune, MaskedMetric, PruneConfig};
use talelab::Result;
use talelab_numkernel::Tensor;

fn mask(s: &BTreeSet<usize>) -> usize {
    s.iter().map(|l| 1 << l).sum()
}

/// Metric given by an arbitrary table over all subsets.
#[derive(Debug)]
struct Table {
    n: usize,
    values: Vec<f64>,
}

impl MaskedMetric for Table {
    fn n_layers(&self) -> usize {
        self.n
    }
    fn metric(&self, dropped: &BTreeSet<usize>) -> Result<f64> {
        Ok(self.values[mask(dropped)])
    }
}

fn table() -> impl Strategy<Value = Table> {
    (1usize..=4).prop_flat_map(|n| {
        // Coarse values so ties actually occur.
        prop::collection::vec((0u8..8).prop_map(|v| v as f64 / 4.0), 1 << n)
            .prop_map(move |values| Table { n, values })
    })
}

fn subsets(n: usize) -> impl Iterator<Item = BTreeSet<usize>> {
    (0..1usize << n).map(move |m| (0..n).filter(|l| m >> l & 1 == 1).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetric_draws_stay_in_support(sigma in 0.05f64..10.0, seed in any::<u64>()) {
        let d = Distribution::symmetric(sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10_000 {
            let v = d.sample(&mut rng);
            prop_assert!((-sigma..=sigma).contains(&v));
        }
    }

    #[test]
    fn interval_draws_stay_in_support(lo in -5.0f64..5.0, width in 0.01f64..5.0, seed in any::<u64>()) {
        let hi = lo + width;
        let d = Distribution::interval(lo, hi).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10_000 {
            let v = d.sample(&mut rng);
            prop_assert!(v >= lo && v <= hi);
        }
    }

    #[test]
    fn prompt_inputs_and_coefficients_stay_in_support(sigma in 0.1f64..4.0, seed in any::<u64>()) {
        let task = TaskSpec::linear(sigma).unwrap();
        for p in task.sample_prompts(50, 10, seed).unwrap() {
            prop_assert!(p.xs.iter().all(|x| (-1.0..=1.0).contains(x)));
            prop_assert!(p.function.coefficients.iter().all(|c| c.abs() <= sigma));
            for (x, y) in p.xs.iter().zip(&p.ys) {
                prop_assert_eq!(*y, p.function.eval(*x));
            }
        }
    }

    #[test]
    fn greedy_follows_its_rules(t in table()) {
        let r = greedy_prune(&t, &PruneConfig::default()).unwrap();
        let mut current = BTreeSet::new();
        let mut value = t.values[0];
        prop_assert_eq!(r.baseline_metric, value);
        for (round, table) in r.per_round.iter().enumerate() {
            // Every not-yet-dropped layer is evaluated exactly once.
            let cands: Vec<usize> = table.iter().map(|c| c.layer).collect();
            let expected: Vec<usize> = (0..t.n).filter(|l| !current.contains(l)).collect();
            prop_assert_eq!(&cands, &expected);
            for c in table {
                let mut s = current.clone();
                s.insert(c.layer);
                prop_assert_eq!(c.metric, t.values[mask(&s)]);
            }
            let best = table.iter().map(|c| c.metric).fold(f64::INFINITY, f64::min);
            match r.dropped_layers.get(round) {
                Some(&chosen) => {
                    let first_best = table.iter().find(|c| c.metric == best).unwrap().layer;
                    prop_assert_eq!(chosen, first_best);
                    prop_assert!(best < value);
                    current.insert(chosen);
                    value = best;
                }
                None => prop_assert!(best >= value),
            }
        }
        prop_assert!(r.dropped_layers.len() == t.n || r.per_round.len() == r.dropped_layers.len() + 1);
        prop_assert_eq!(r.best_metric, value);
        prop_assert_eq!(r.best_metric, t.values[mask(&r.dropped_set())]);
        // No subset beats the brute-force optimum, and greedy never ends above baseline.
        let optimum = subsets(t.n).map(|s| t.values[mask(&s)]).fold(f64::INFINITY, f64::min);
        prop_assert!(optimum <= r.best_metric && r.best_metric <= r.baseline_metric);
    }

    #[test]
    fn greedy_is_optimal_for_separable_metrics(
        base in 0.5f64..2.0,
        effects in prop::collection::vec(-0.3f64..0.3, 1..=4),
    ) {
        let n = effects.len();
        let values = subsets(n).map(|s| base + s.iter().map(|&l| effects[l]).sum::<f64>()).collect();
        let t = Table { n, values };
        let r = greedy_prune(&t, &PruneConfig::default()).unwrap();
        let optimum = subsets(n).map(|s| t.values[mask(&s)]).fold(f64::INFINITY, f64::min);
        prop_assert!((r.best_metric - optimum).abs() <= 1e-12);
        let harmful: BTreeSet<usize> = (0..n).filter(|&l| effects[l] < 0.0).collect();
        prop_assert_eq!(r.dropped_set(), harmful);
    }

    #[test]
    fn discrepancy_is_a_symmetric_premetric(
        a in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 9), 1..6),
        b_seed in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 9), 6),
    ) {
        let n = a.len();
        let pa = profile(&a);
        let pb = profile(&b_seed[..n]);
        let w = default_discrepancy_weights();
        let ab = discrepancy(&pa, &pb, &w).unwrap();
        let ba = discrepancy(&pb, &pa, &w).unwrap();
        prop_assert_eq!(&ab.per_layer, &ba.per_layer);
        prop_assert_eq!(ab.aggregate, ba.aggregate);
        prop_assert!(ab.per_layer.iter().all(|&v| (0.0..=2.0 + 1e-12).contains(&v)));
        prop_assert_eq!(discrepancy(&pa, &pa, &w).unwrap().aggregate, 0.0);
    }

    #[test]
    fn threshold_classes_partition_functions(
        pairs in prop::collection::vec((0.0f64..2.0, 0.0f64..2.0), 1..50),
    ) {
        let base: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let pruned: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let r = threshold_analysis("p", &base, &pruned, &BTreeSet::new()).unwrap();
        let thr = base.iter().sum::<f64>() / base.len() as f64;
        let count = |fb: bool, fp: bool| {
            pairs.iter().filter(|(b, p)| (*b < thr) == fb && (*p < thr) == fp).count()
        };
        prop_assert_eq!(r.both + r.only_base + r.only_pruned + r.neither, pairs.len());
        prop_assert_eq!(r.both, count(true, true));
        prop_assert_eq!(r.only_base, count(true, false));
        prop_assert_eq!(r.only_pruned, count(false, true));
        prop_assert_eq!(r.neither, count(false, false));
    }
}

fn profile(rows: &[Vec<f64>]) -> LayerProfile {
    let layers = rows
        .iter()
        .map(|r| {
            let mut s = LayerStats {
                median_dist_l1: 0.0,
                median_dist_l2: 0.0,
                mean_dist_l1: 0.0,
                mean_dist_l2: 0.0,
                last_token_norm_mean: 0.0,
                pairwise_dist_mean: 0.0,
                dist_variance: 0.0,
                cov_trace: 0.0,
                cov_top_eigenvalue: 0.0,
            };
            for (stat, v) in Statistic::ALL.iter().zip(r) {
                s.set(*stat, *v);
            }
            s
        })
        .collect();
    LayerProfile {
        layers,
        n_prompts: 10,
        positions: DistancePositions::AllPreceding,
        meta: ProfileMeta::default(),
    }
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
    use rand_distr::{Distribution as _, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

fn meta() -> SurrogateMeta {
    SurrogateMeta {
        layer: 0,
        dataset: "t".into(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn surrogate_fit_satisfies_normal_equations(
        d in 2usize..8,
        extra in 1usize..40,
        seed in any::<u64>(),
    ) {
        let n = d + extra;
        let x = gaussian(n, d, seed);
        let y = gaussian(n, d, seed ^ 0x55);
        let f = fit(&x, &y, meta()).unwrap();
        let resid = x.matmul(&f.w.transpose()).unwrap().sub(&y).unwrap();
        // Xᵀ R = 0 at the least-squares solution.
        let g = x.transpose().matmul(&resid).unwrap();
        let scale = x.frobenius_norm() * y.frobenius_norm();
        prop_assert!(g.frobenius_norm() <= 1e-10 * scale);
        // Any perturbation of W does not lower the residual.
        let e = gaussian(d, d, seed ^ 0xaa).scaled(1e-3);
        let worse = x.matmul(&f.w.add(&e).unwrap().transpose()).unwrap().sub(&y).unwrap();
        prop_assert!(worse.frobenius_norm() >= resid.frobenius_norm());
    }

    #[test]
    fn inverse_of_recovered_map_undoes_it(d in 2usize..8, seed in any::<u64>()) {
        let a = Tensor::identity(d).add(&gaussian(d, d, seed).scaled(0.2 / (d as f64).sqrt())).unwrap();
        let x = gaussian(4 * d, d, seed ^ 1);
        let y = x.matmul(&a.transpose()).unwrap();
        let f = fit(&x, &y, meta()).unwrap();
        prop_assert!(f.w.max_abs_diff(&a) < 1e-9);
        let inv = inverse_map(&f).unwrap();
        prop_assert!(inv.warning.is_none());
        let prod = inv.matrix.matmul(&a).unwrap();
        prop_assert!(prod.max_abs_diff(&Tensor::identity(d)) < 1e-9);
    }
}
