// SPDX-License-Identifier: MIT OR Apache-2.0

//! Helpers shared by the examples: load a checkpoint given as the first
//! argument, or train a small model in a few seconds.

#![allow(dead_code)]

use talelab::model::{load_checkpoint, Model, ModelConfig};
use talelab::taskgen::{PromptBatch, TaskSpec};
use talelab::trainer::{train_with, Curriculum, TrainConfig};

pub const K: usize = 20;

pub fn small_config() -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        n_layers: 4,
        n_heads: 2,
        d_model: 16,
        max_positions: 2 * K + 1,
        layernorm_eps: 1e-5,
    };
    let train = TrainConfig {
        lr: 2e-3,
        batch_size: 8,
        total_steps: 1500,
        k_max: K,
        curriculum: Curriculum {
            start: 11,
            increment: 3,
            every: 300,
        },
        log_every: 250,
        validation_prompts: 64,
        ..TrainConfig::desk()
    };
    (model, train)
}

/// The checkpoint named by the first argument, or a freshly trained small model.
pub fn model_from_args() -> Model {
    if let Some(path) = std::env::args().nth(1) {
        println!("loading {path}");
        return load_checkpoint(&path).expect("readable checkpoint");
    }
    println!("no checkpoint given; training a small model (pass a path to skip)");
    let (model, train) = small_config();
    let init = Model::init(model, train.seed).unwrap();
    let out = train_with(init, &train, &TaskSpec::linear(1.0).unwrap(), |_| {}).unwrap();
    println!("validation mse {:.3e}", out.validation_mse);
    out.model
}

pub fn prompts(task: &TaskSpec, n: usize, seed: u64) -> Vec<PromptBatch> {
    task.sample_prompts(n, K, seed).unwrap()
}
