// SPDX-License-Identifier: MIT OR Apache-2.0

use talelab::model::{forward, load_checkpoint, save_checkpoint, InterventionSpec, Model, ModelConfig, Predictor};
use talelab::taskgen::TaskSpec;
use talelab_numkernel::Tensor;

fn small() -> Model {
    let cfg = ModelConfig {
        n_layers: 3,
        n_heads: 2,
        d_model: 16,
        max_positions: 41,
        layernorm_eps: 1e-5,
    };
    let mut m = Model::init(cfg, 11).unwrap();
    // Larger weights than the init scale so every block matters.
    for t in m.params.tensors_mut() {
        let scaled = t.scaled(8.0);
        *t = scaled;
    }
    m
}

fn tokens(seed: u64) -> Vec<f64> {
    TaskSpec::linear(1.0).unwrap().sample_prompts(1, 12, seed).unwrap()[0].tokens()
}

#[test]
fn later_tokens_never_affect_earlier_predictions() {
    let m = small();
    let a = tokens(1);
    for t in [3, 10, a.len() - 1] {
        let mut b = a.clone();
        b[t] += 5.0;
        let pa = forward(&m, &InterventionSpec::none(), &a).unwrap();
        let pb = forward(&m, &InterventionSpec::none(), &b).unwrap();
        // Predictions sit at even positions 0, 2, 4, ...
        for (i, (x, y)) in pa.predictions.iter().zip(&pb.predictions).enumerate() {
            let pos = 2 * i;
            if pos < t {
                assert!((x - y).abs() <= 1e-12, "position {pos} moved after editing {t}");
            }
        }
        for l in 0..pa.hidden.len() {
            for pos in 0..t {
                assert_eq!(pa.state(l, pos), pb.state(l, pos));
            }
        }
        let last = pa.predictions.len() - 1;
        if 2 * last >= t {
            assert_ne!(pa.predictions[last], pb.predictions[last]);
        }
    }
}

#[test]
fn drop_equals_zero_alpha_and_unit_alpha_equals_base() {
    let m = small();
    let toks = tokens(2);
    let base = forward(&m, &InterventionSpec::none(), &toks).unwrap();
    for l in 0..3 {
        let dropped = forward(&m, &InterventionSpec::drop_layers([l]), &toks).unwrap();
        let zero = forward(&m, &InterventionSpec::none().with_alpha(l, 0.0), &toks).unwrap();
        let one = forward(&m, &InterventionSpec::none().with_alpha(l, 1.0), &toks).unwrap();
        assert_eq!(dropped.predictions, zero.predictions);
        assert_eq!(dropped.hidden, zero.hidden);
        assert_eq!(one.predictions, base.predictions);
        assert_ne!(dropped.predictions, base.predictions);
        // A dropped layer passes its input through unchanged.
        assert_eq!(dropped.hidden[l], dropped.hidden[l + 1]);
    }
}

#[test]
fn identity_injection_is_bitwise_baseline() {
    let m = small();
    let toks = tokens(3);
    let base = forward(&m, &InterventionSpec::none(), &toks).unwrap();
    for l in 0..3 {
        let inj = forward(
            &m,
            &InterventionSpec::none().with_injection(l, Tensor::identity(16)),
            &toks,
        )
        .unwrap();
        assert_eq!(inj.predictions, base.predictions);
    }
}

#[test]
fn drop_sets_have_set_semantics() {
    let m = small();
    let toks = tokens(4);
    let a = forward(&m, &InterventionSpec::drop_layers([0, 2]), &toks).unwrap();
    let b = forward(&m, &InterventionSpec::drop_layers([2, 0, 2]), &toks).unwrap();
    let c = forward(
        &m,
        &InterventionSpec::none().with_dropped(2).with_dropped(0),
        &toks,
    )
    .unwrap();
    assert_eq!(a.predictions, b.predictions);
    assert_eq!(a.predictions, c.predictions);
    assert_eq!(
        InterventionSpec::drop_layers([2, 0]).label(),
        InterventionSpec::drop_layers([0, 2]).label()
    );
}

#[test]
fn out_of_range_interventions_are_rejected() {
    let m = small();
    let toks = tokens(5);
    assert!(forward(&m, &InterventionSpec::drop_layers([3]), &toks).is_err());
    assert!(forward(&m, &InterventionSpec::none().with_alpha(0, 1.5), &toks).is_err());
    assert!(forward(&m, &InterventionSpec::none().with_injection(0, Tensor::identity(4)), &toks).is_err());
}

#[test]
fn readout_of_final_state_matches_predictions() {
    let m = small();
    let trace = forward(&m, &InterventionSpec::drop_layers([1]), &tokens(6)).unwrap();
    let again = m.readout_from_hidden(trace.hidden.last().unwrap()).unwrap();
    assert_eq!(again, trace.predictions);
}

#[test]
fn batched_prediction_matches_single_forward() {
    let m = small();
    let prompts = TaskSpec::linear(2.0).unwrap().sample_prompts(40, 12, 9).unwrap();
    let spec = InterventionSpec::drop_layers([1]);
    let batched = m.masked(spec.clone()).predict(&prompts).unwrap();
    let traces = m.masked(spec.clone()).traces(&prompts).unwrap();
    for ((p, b), t) in prompts.iter().zip(&batched).zip(&traces) {
        let single = forward(&m, &spec, &p.tokens()).unwrap();
        for ((x, y), z) in single.predictions.iter().zip(b).zip(&t.predictions) {
            assert!((x - y).abs() <= 1e-12 && (x - z).abs() <= 1e-12);
        }
    }
}

#[test]
fn checkpoint_round_trip_reproduces_predictions_bitwise() {
    let m = small();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config, m.config);
    let prompts = TaskSpec::linear(1.0).unwrap().sample_prompts(8, 12, 10).unwrap();
    assert_eq!(m.predict(&prompts).unwrap(), back.predict(&prompts).unwrap());
    assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes().unwrap());
}
