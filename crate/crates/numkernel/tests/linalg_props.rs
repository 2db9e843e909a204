// SPDX-License-Identifier: MIT OR Apache-2.0

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use talelab_numkernel::linalg::gaussian_matrix;
use talelab_numkernel::{least_squares, pseudo_inverse, random_orthogonal, svd, Tensor, PINV_RTOL};

fn gram_error(u: &Tensor) -> f64 {
    let g = u.transpose().matmul(u).unwrap();
    g.sub(&Tensor::identity(u.cols())).unwrap().frobenius_norm()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn svd_invariants(rows in 1usize..=32, cols in 1usize..=32, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gaussian_matrix(rows, cols, 1.0, &mut rng);
        let s = svd(&a).unwrap();
        prop_assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.singular_values.iter().all(|&v| v >= 0.0));
        prop_assert!(gram_error(&s.u) < 1e-8);
        prop_assert!(gram_error(&s.v) < 1e-8);
        let rel = s.reconstruct().sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
        prop_assert!(rel < 1e-8, "reconstruction {}", rel);
    }

    #[test]
    fn least_squares_residual_orthogonal_to_columns(n in 4usize..40, d in 1usize..6, p in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian_matrix(n, d, 1.0, &mut rng);
        let y = gaussian_matrix(n, p, 1.0, &mut rng);
        let w = least_squares(&x, &y).unwrap();
        let resid = x.matmul(&w.transpose()).unwrap().sub(&y).unwrap();
        let normal = x.transpose().matmul(&resid).unwrap();
        prop_assert!(normal.frobenius_norm() < 1e-6);
    }

    #[test]
    fn pinv_satisfies_penrose_identity(n in 1usize..12, rank in 1usize..12, seed in any::<u64>()) {
        let rank = rank.min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = gaussian_matrix(n, rank, 1.0, &mut rng);
        let r = gaussian_matrix(rank, n, 1.0, &mut rng);
        let w = l.matmul(&r).unwrap();
        let p = pseudo_inverse(&w, PINV_RTOL).unwrap();
        let back = w.matmul(&p).unwrap().matmul(&w).unwrap();
        prop_assert!(back.sub(&w).unwrap().frobenius_norm() <= 1e-8 * w.frobenius_norm().max(1.0));
    }

    #[test]
    fn random_orthogonal_is_isometry(d in 1usize..20, seed in any::<u64>()) {
        let q = random_orthogonal(d, seed).unwrap();
        prop_assert!(gram_error(&q) < 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdead);
        let x = gaussian_matrix(d, 1, 1.0, &mut rng);
        let qx = q.matvec(x.data()).unwrap();
        let nx = x.frobenius_norm();
        let nqx = qx.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((nx - nqx).abs() < 1e-8);
    }
}

#[test]
fn least_squares_recovers_planted_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let a = gaussian_matrix(4, 4, 1.0, &mut rng);
    let x = gaussian_matrix(64, 4, 1.0, &mut rng);
    let y = x.matmul(&a.transpose()).unwrap();
    let w = least_squares(&x, &y).unwrap();
    assert!(w.sub(&a).unwrap().frobenius_norm() < 1e-8);
}

#[test]
fn pinv_of_orthogonal_is_transpose() {
    let q = random_orthogonal(8, 77).unwrap();
    let p = pseudo_inverse(&q, PINV_RTOL).unwrap();
    assert!(p.sub(&q.transpose()).unwrap().frobenius_norm() < 1e-8);
}
