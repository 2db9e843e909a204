// SPDX-License-Identifier: MIT OR Apache-2.0

//! Replaces a layer's output with an injected linear map: the inverse of its
//! surrogate, and norm-matched random controls.
//!
//! ```text
//! cargo run --release --example inverse_injection -- [model.ckpt] [layer]
//! ```

mod common;

use talelab::model::InterventionSpec;
use talelab::surrogate::{build_intervention_map, collect_io_pairs, fit_layer, MapKind, TokenPolicy, NORM_BUDGET};
use talelab::taskgen::TaskSpec;
use talelab::tale::{evaluate_masked, greedy_prune, PruneConfig, ValidationMetric};

fn main() -> talelab::Result<()> {
    let model = common::model_from_args();
    let task = TaskSpec::linear(2.0)?;
    let eval = common::prompts(&task, 256, 4);
    let calibration = common::prompts(&task, 200, 5);
    let layer = match std::env::args().nth(2) {
        Some(l) => l.parse().expect("layer index"),
        None => {
            let r = greedy_prune(&ValidationMetric::new(&model, &eval), &PruneConfig::default())?;
            println!("pruning drops {:?}", r.dropped_layers);
            r.dropped_layers.first().copied().unwrap_or(model.n_layers() - 1)
        }
    };
    let traces = model.unmasked().traces(&calibration)?;
    let fit = fit_layer(&traces, layer, TokenPolicy::AllTokens, "sigma2")?;
    let (_, outputs) = collect_io_pairs(&traces, layer, TokenPolicy::AllTokens)?;

    println!("layer {layer} on {}", task.label());
    println!("  {:<18} {:.4e}", "base", evaluate_masked(&model, &InterventionSpec::none(), &eval)?);
    println!("  {:<18} {:.4e}", "drop", evaluate_masked(&model, &InterventionSpec::drop_layers([layer]), &eval)?);
    for (seed, kind) in [MapKind::InverseSurrogate, MapKind::RandomRotation, MapKind::RandomTriangular]
        .into_iter()
        .enumerate()
    {
        let map = build_intervention_map(kind, Some(&fit), model.config.d_model, seed as u64, Some(&outputs), NORM_BUDGET)?;
        let spec = InterventionSpec::none().with_injection(layer, map.matrix);
        let metric = evaluate_masked(&model, &spec, &eval)?;
        print!("  {:<18} {metric:.4e}  median gain {:.3}", format!("{kind:?}"), map.calibration_median_gain.unwrap_or(f64::NAN));
        match map.warning {
            Some(w) => println!("  ({w})"),
            None => println!(),
        }
    }
    Ok(())
}
