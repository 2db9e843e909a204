// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scales one layer's residual update by α in [0, 1] and traces the
//! validation error between dropping it (α = 0) and the full model (α = 1).
//!
//! ```text
//! cargo run --release --example alpha_sweep -- [model.ckpt]
//! ```

mod common;

use talelab::harness::alpha_sweep;
use talelab::taskgen::TaskSpec;

fn main() -> talelab::Result<()> {
    let model = common::model_from_args();
    let alphas: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    for sigma in [1.0, 2.0] {
        let prompts = common::prompts(&TaskSpec::linear(sigma)?, 200, 6);
        println!("sigma {sigma}");
        for layer in 0..model.n_layers() {
            let curve = alpha_sweep(&model, layer, &alphas, &prompts)?;
            let cells: Vec<String> = curve.iter().map(|p| format!("{:.2e}", p.metric)).collect();
            println!("  layer {layer}: {}", cells.join(" "));
        }
    }
    Ok(())
}
