// SPDX-License-Identifier: MIT OR Apache-2.0

//! Least-squares linear surrogates of each layer: spectrum of `W - I`,
//! stable rank and gain statistics.
//!
//! ```text
//! cargo run --release --example surrogate_spectrum -- [model.ckpt]
//! ```

mod common;

use talelab::surrogate::{fit_layer, TokenPolicy};
use talelab::taskgen::TaskSpec;

fn main() -> talelab::Result<()> {
    let model = common::model_from_args();
    for (name, task) in [("id", TaskSpec::linear(1.0)?), ("sigma2", TaskSpec::linear(2.0)?)] {
        let traces = model.unmasked().traces(&common::prompts(&task, 200, 3))?;
        println!("{name}");
        println!("  layer  median gain  stable rank  residual  top singular values");
        for layer in 0..model.n_layers() {
            let f = fit_layer(&traces, layer, TokenPolicy::AllTokens, name)?;
            let top: Vec<String> = f.spectrum.iter().take(4).map(|s| format!("{s:.3}")).collect();
            println!(
                "  {layer:>5}  {:>11.4}  {:>11.3}  {:>8.2e}  {}",
                f.median_gain,
                f.stable_rank,
                f.fit_residual,
                top.join(" ")
            );
        }
    }
    Ok(())
}
