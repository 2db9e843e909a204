// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy layer elimination on in-distribution and shifted validation sets.
//!
//! ```text
//! cargo run --release --example prune_layers -- [model.ckpt]
//! ```

mod common;

use talelab::taskgen::{FunctionFamily, TaskSpec};
use talelab::tale::{greedy_prune, PruneConfig, ValidationMetric};

fn main() -> talelab::Result<()> {
    let model = common::model_from_args();
    let tasks = [
        TaskSpec::linear(1.0)?,
        TaskSpec::linear(2.0)?,
        TaskSpec::linear(3.0)?,
        TaskSpec::linear_interval(1.0, 2.0)?,
        TaskSpec::fixed(FunctionFamily::Runge, 1.0)?,
    ];
    for task in &tasks {
        let prompts = common::prompts(task, 256, 7);
        let r = greedy_prune(&ValidationMetric::new(&model, &prompts), &PruneConfig::default())?;
        println!(
            "{:<14} base {:.4e}  best {:.4e}  ratio {:.3}  dropped {:?}",
            task.label(),
            r.baseline_metric,
            r.best_metric,
            r.best_over_full_ratio,
            r.dropped_layers
        );
        for (i, round) in r.per_round.iter().enumerate() {
            let cells: Vec<String> = round.iter().map(|c| format!("{}:{:.3e}", c.layer, c.metric)).collect();
            println!("    round {i}: {}", cells.join("  "));
        }
    }
    Ok(())
}
