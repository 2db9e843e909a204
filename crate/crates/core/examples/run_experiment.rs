// SPDX-License-Identifier: MIT OR Apache-2.0

//! Runs every stage of a small experiment from a TOML config and lists the
//! files written to the run directory.
//!
//! ```text
//! cargo run --release --example run_experiment -- [config.toml] [out_dir]
//! ```

use std::path::PathBuf;

use talelab::harness::{run_experiment, ExperimentConfig, Verb};

const TINY: &str = r#"
name = "tiny"
profile = "desk"

[model]
n_layers = 3
n_heads = 2
d_model = 16
max_positions = 21

[train]
total_steps = 2000
batch_size = 8
k_max = 10
log_every = 100

[train.curriculum]
start = 5
increment = 1
every = 100

[prune]
n_prompts = 64

[profile_stage]
n_prompts = 48

[surrogate]
n_prompts = 48

[intervene]
n_calibration = 48

[sweep]
sigmas = [1.0, 2.0, 3.0]
n_functions = 10
n_batches = 2

[eval.protocol]
seeds = [1, 2]
n_functions = 5
n_batches = 2
n_points = 11
"#;

fn main() -> talelab::Result<()> {
    let mut args = std::env::args().skip(1);
    let cfg = match args.next() {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::from_toml_str(TINY)?,
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs".into()));
    let verbs = [
        Verb::Train,
        Verb::Prune,
        Verb::Profile,
        Verb::Surrogate,
        Verb::Intervene,
        Verb::Sweep,
        Verb::Eval,
    ];
    let summary = run_experiment(&cfg, &verbs, &out, &mut |line| println!("{line}"))?;
    println!("run directory {}", summary.dir.display());
    for o in &summary.manifest.outputs {
        println!("  {}  {}", &o.sha256[..12], o.path.display());
    }
    Ok(())
}
