// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer elimination on targets outside the polynomial family: the Runge
//! function and a truncated Weierstrass series.
//!
//! ```text
//! cargo run --release --example non_polynomial -- [model.ckpt]
//! ```

mod common;

use talelab::taskgen::{FunctionFamily, TaskSpec};
use talelab::tale::{greedy_prune, PruneConfig, ValidationMetric};

fn main() -> talelab::Result<()> {
    let model = common::model_from_args();
    for family in [FunctionFamily::Runge, FunctionFamily::weierstrass_default()] {
        let task = TaskSpec::fixed(family, 1.0)?;
        let prompts = common::prompts(&task, 256, 8);
        let r = greedy_prune(&ValidationMetric::new(&model, &prompts), &PruneConfig::default())?;
        println!(
            "{:<28} base {:.4e}  pruned {:.4e}  ratio {:.3}  dropped {:?}",
            task.label(),
            r.baseline_metric,
            r.best_metric,
            r.best_over_full_ratio,
            r.dropped_layers
        );
    }
    Ok(())
}
