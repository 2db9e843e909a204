// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-function comparison of the full and pruned model across coefficient
//! scales: how many functions each one fits below the mean base error.
//!
//! ```text
//! cargo run --release --example threshold_sweep -- [model.ckpt]
//! ```

mod common;

use talelab::harness::eval::{function_set, threshold_for_model};
use talelab::taskgen::TaskSpec;
use talelab::tale::{greedy_prune, PruneConfig, ValidationMetric};

fn main() -> talelab::Result<()> {
    let model = common::model_from_args();
    println!("sigma   both  only_base  only_pruned  neither  agg_ratio  dropped");
    for i in 0..=4 {
        let sigma = 1.0 + 0.5 * i as f64;
        let task = TaskSpec::linear(sigma)?;
        let validation = common::prompts(&task, 128, 100 + i);
        let pruned = greedy_prune(&ValidationMetric::new(&model, &validation), &PruneConfig::default())?;
        let functions = function_set(&task, 50, 4, common::K + 1, 200 + i)?;
        let row = threshold_for_model(&task.label(), &model, &pruned.dropped_set(), &functions)?;
        println!(
            "{sigma:<6} {:>5} {:>10} {:>12} {:>8} {:>10.3}  {:?}",
            row.both, row.only_base, row.only_pruned, row.neither, row.agg_ratio, row.dropped
        );
    }
    Ok(())
}
