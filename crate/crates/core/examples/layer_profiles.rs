// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer hidden-state geometry and its discrepancy from the training
//! distribution, before and after pruning.
//!
//! ```text
//! cargo run --release --example layer_profiles -- [model.ckpt]
//! ```

mod common;

use talelab::geometry::{
    default_discrepancy_weights, discrepancy, extract_profile, DistancePositions, LayerProfile, ProfileMeta,
    Statistic,
};
use talelab::model::{InterventionSpec, Model};
use talelab::taskgen::{PromptBatch, TaskSpec};
use talelab::tale::{greedy_prune, PruneConfig, ValidationMetric};

fn profile(model: &Model, spec: InterventionSpec, prompts: &[PromptBatch]) -> talelab::Result<LayerProfile> {
    let traces = model.masked(spec).traces(prompts)?;
    extract_profile(&traces, DistancePositions::AllPreceding, ProfileMeta::default())
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:7.3}")).collect::<Vec<_>>().join(" ")
}

fn main() -> talelab::Result<()> {
    let model = common::model_from_args();
    let reference = profile(&model, InterventionSpec::none(), &common::prompts(&TaskSpec::linear(1.0)?, 200, 1))?;
    let w = default_discrepancy_weights();
    println!("median L2 distance per layer boundary (embedding first)");
    println!("{:<12} {}", "U(-1,1)", fmt(&reference.series(Statistic::MedianDistL2)));
    for sigma in [2.0, 3.0] {
        let task = TaskSpec::linear(sigma)?;
        let prompts = common::prompts(&task, 200, 2);
        let base = profile(&model, InterventionSpec::none(), &prompts)?;
        let pruned_set = greedy_prune(&ValidationMetric::new(&model, &prompts), &PruneConfig::default())?;
        let pruned = profile(&model, pruned_set.spec(), &prompts)?;
        println!("{:<12} {}", task.label(), fmt(&base.series(Statistic::MedianDistL2)));
        println!("{:<12} {}", "  pruned", fmt(&pruned.series(Statistic::MedianDistL2)));
        println!(
            "  D(base, ref) {:.4}   D(pruned {:?}, ref) {:.4}",
            discrepancy(&base, &reference, &w)?.aggregate,
            pruned_set.dropped_layers,
            discrepancy(&pruned, &reference, &w)?.aggregate
        );
    }
    Ok(())
}
