// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite-difference checks for every differentiable operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use talelab_numkernel::{AttentionShape, Graph, Tape, Tensor, Var};

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Compares tape gradients against central differences for every input.
fn check<F>(name: &str, inputs: Vec<Tensor>, build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(&loss).scalar_value().unwrap()
    };

    for (idx, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).unwrap().data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.clone();
            plus[idx].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[idx].data_mut()[j] -= STEP;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale = norm(&analytic).max(norm(&numeric));
        let rel = if scale == 0.0 { 0.0 } else { diff / scale };
        assert!(
            rel < REL_TOL,
            "{name}: input {idx} relative error {rel:e} (analytic {analytic:?}, numeric {numeric:?})"
        );
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Reduces any node to a scalar through a fixed random target.
fn reduce(tape: &mut Tape, node: Var, seed: u64) -> Var {
    let n = tape.value(&node).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    tape.mse(&node, &target).unwrap()
}

#[test]
fn matmul_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    check("matmul", vec![random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)], |t, v| {
        let y = t.matmul(&v[0], &v[1]).unwrap();
        reduce(t, y, 10)
    });
}

#[test]
fn sum_of_linear_map_has_outer_product_gradient() {
    // L = 1ᵀ W x  =>  dL/dW_ij = x_j
    let x = Tensor::matrix(3, 1, vec![0.5, -2.0, 1.5]).unwrap();
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::from_fn(2, 3, |i, j| (i + j) as f64));
    let xc = tape.constant(x.clone());
    let ones = tape.constant(Tensor::filled(&[1, 2], 1.0));
    let wx = tape.matmul(&w, &xc).unwrap();
    let loss = tape.matmul(&ones, &wx).unwrap();
    let grads = tape.backward(loss).unwrap();
    let expected = Tensor::from_fn(2, 3, |_, j| x.data()[j]);
    assert_eq!(grads.get(w).unwrap(), &expected);
}

#[test]
fn add_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    check("add", vec![random(&[3, 4], &mut rng), random(&[3, 4], &mut rng)], |t, v| {
        let y = t.add(&v[0], &v[1]).unwrap();
        reduce(t, y, 11)
    });
    check("add-row", vec![random(&[3, 4], &mut rng), random(&[4], &mut rng)], |t, v| {
        let y = t.add(&v[0], &v[1]).unwrap();
        reduce(t, y, 12)
    });
}

#[test]
fn scale_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    check("scale", vec![random(&[2, 3], &mut rng)], |t, v| {
        let y = t.scale(&v[0], -0.7).unwrap();
        reduce(t, y, 13)
    });
}

#[test]
fn softmax_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    check("softmax_rows", vec![random(&[3, 5], &mut rng)], |t, v| {
        let y = t.softmax_rows(&v[0]).unwrap();
        reduce(t, y, 14)
    });
}

#[test]
fn layernorm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![
        random(&[3, 6], &mut rng),
        random(&[6], &mut rng),
        random(&[6], &mut rng),
    ];
    check("layernorm", inputs, |t, v| {
        let y = t.layernorm(&v[0], &v[1], &v[2], 1e-5).unwrap();
        reduce(t, y, 15)
    });
}

#[test]
fn gelu_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    check("gelu", vec![random(&[4, 3], &mut rng).scaled(3.0)], |t, v| {
        let y = t.gelu(&v[0]).unwrap();
        reduce(t, y, 16)
    });
}

#[test]
fn embed_and_positional_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let values = vec![0.3, -0.8, 1.2, 0.1, 0.5, -0.4];
    let inputs = vec![
        random(&[1, 4], &mut rng),
        random(&[4], &mut rng),
        random(&[5, 4], &mut rng),
    ];
    check("embed_scalar+add_positional", inputs, move |t, v| {
        let e = t.embed_scalar(&values, &v[0], &v[1]).unwrap();
        let y = t.add_positional(&e, &v[2], 3).unwrap();
        reduce(t, y, 17)
    });
}

#[test]
fn attention_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let shape = AttentionShape {
        batch: 2,
        seq_len: 4,
        heads: 2,
    };
    let inputs = vec![
        random(&[8, 6], &mut rng),
        random(&[8, 6], &mut rng),
        random(&[8, 6], &mut rng),
    ];
    check("causal_attention", inputs, |t, v| {
        let y = t.causal_attention(&v[0], &v[1], &v[2], shape).unwrap();
        reduce(t, y, 18)
    });
}

#[test]
fn readout_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = vec![
        random(&[5, 3], &mut rng),
        random(&[3, 1], &mut rng),
        random(&[1], &mut rng),
    ];
    check("readout", inputs, |t, v| {
        let y = t.readout(&v[0], &v[1], &v[2], &[0, 2, 4, 2]).unwrap();
        reduce(t, y, 19)
    });
}

#[test]
fn squared_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    check("mse", vec![random(&[7], &mut rng)], |t, v| {
        t.mse(&v[0], &[0.0; 7]).unwrap()
    });
}
