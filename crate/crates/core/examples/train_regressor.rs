// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trains an in-context linear regressor and saves a checkpoint.
//!
//! ```text
//! cargo run --release --example train_regressor -- [steps] [out.ckpt]
//! ```

mod common;

use talelab::model::{save_checkpoint, Model};
use talelab::taskgen::TaskSpec;
use talelab::trainer::train_with;

fn main() -> talelab::Result<()> {
    let mut args = std::env::args().skip(1);
    let (model_cfg, mut train) = common::small_config();
    if let Some(steps) = args.next() {
        train.total_steps = steps.parse().expect("step count");
    }
    let out = args.next().unwrap_or_else(|| "regressor.ckpt".into());

    let task = TaskSpec::linear(1.0)?;
    println!(
        "{} layers, d={}, {} parameters; {} steps of batch {}",
        model_cfg.n_layers,
        model_cfg.d_model,
        model_cfg.n_params(),
        train.total_steps,
        train.batch_size
    );
    let init = Model::init(model_cfg, train.seed)?;
    let result = train_with(init, &train, &task, |p| {
        println!("step {:>6}  k={:>2}  loss {:.4e}", p.step, p.context_length, p.loss);
    })?;
    println!("held-out mse {:.4e}", result.validation_mse);
    save_checkpoint(&result.model, &out)?;
    println!("wrote {out}");
    Ok(())
}
