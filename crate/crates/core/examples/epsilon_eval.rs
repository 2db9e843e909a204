// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded evaluation error ε_σ of the full and pruned model on several
//! coefficient scales.
//!
//! ```text
//! cargo run --release --example epsilon_eval -- [model.ckpt]
//! ```

mod common;

use talelab::harness::{epsilon_sigma, EvalConfig};
use talelab::taskgen::TaskSpec;
use talelab::tale::{greedy_prune, PruneConfig, ValidationMetric};

fn main() -> talelab::Result<()> {
    let model = common::model_from_args();
    let cfg = EvalConfig::desk(common::K + 1);
    for sigma in [1.0, 2.0, 3.0] {
        let task = TaskSpec::linear(sigma)?;
        let validation = common::prompts(&task, 128, 9);
        let r = greedy_prune(&ValidationMetric::new(&model, &validation), &PruneConfig::default())?;
        let base = epsilon_sigma(&model.unmasked(), &cfg, &task)?;
        let pruned = epsilon_sigma(&model.masked(r.spec()), &cfg, &task)?;
        println!(
            "sigma {sigma}: base {:.4e}  pruned {:.4e}  dropped {:?}",
            base.mean, pruned.mean, r.dropped_layers
        );
    }
    Ok(())
}
