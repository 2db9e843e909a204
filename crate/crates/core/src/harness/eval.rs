// SPDX-License-Identifier: MIT OR Apache-2.0

//! Evaluation protocols: multi-seed ε_σ, per-function threshold analysis and
//! residual α-sweeps.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{predict_queries, InterventionSpec, Model, Predictor};
use crate::taskgen::{sample_prompt_with, PromptBatch, TaskSpec};
use crate::tale::evaluate_masked;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    /// Functions per seed.
    pub n_functions: usize,
    /// Prompts per function.
    pub n_batches: usize,
    /// Points per prompt (context plus query).
    pub n_points: usize,
    /// Leading `n + 1` positions are not scored.
    pub degree: usize,
}

impl EvalConfig {
    /// Five seeds, 100 functions, 64 prompts of 41 points.
    pub fn paper() -> Self {
        Self {
            seeds: vec![42, 123, 456, 789, 1011],
            n_functions: 100,
            n_batches: 64,
            n_points: 41,
            degree: 1,
        }
    }

    /// Five seeds of 20 functions with 8 prompts each.
    pub fn desk(n_points: usize) -> Self {
        Self {
            n_functions: 20,
            n_batches: 8,
            n_points,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(invalid("eval config", "needs at least one seed"));
        }
        if self.n_points <= self.degree + 1 {
            return Err(invalid(
                "eval config",
                format!(
                    "n_points {} leaves nothing to score after {} positions",
                    self.n_points,
                    self.degree + 1
                ),
            ));
        }
        if self.n_functions == 0 || self.n_batches == 0 {
            return Err(invalid("eval config", "n_functions and n_batches must be positive"));
        }
        Ok(())
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self::paper()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonResult {
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

/// Prompts for one seed, grouped per function: `n_functions × n_batches`.
pub fn epsilon_prompts(cfg: &EvalConfig, task: &TaskSpec, seed: u64) -> Result<Vec<Vec<PromptBatch>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.n_functions)
        .map(|_| {
            let f = task.sample_function(&mut rng)?;
            (0..cfg.n_batches)
                .map(|_| sample_prompt_with(&f, &task.inputs, cfg.n_points - 1, &mut rng))
                .collect()
        })
        .collect()
}

/// Mean squared error over functions, prompts and positions `n+2 … N_p`
/// (1-based) for one set of squared-error rows.
pub fn epsilon_from_errors(sq_errors: &[Vec<Vec<f64>>], degree: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for per_fn in sq_errors {
        for row in per_fn {
            for e in row.iter().skip(degree + 1) {
                total += e;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(invalid("epsilon", "no scored positions"));
    }
    Ok(total / count as f64)
}

/// Per-seed errors and their mean for a predictor on `task`.
pub fn epsilon_sigma(
    predictor: &(impl Predictor + ?Sized),
    cfg: &EvalConfig,
    task: &TaskSpec,
) -> Result<EpsilonResult> {
    cfg.validate()?;
    let per_seed = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let grouped = epsilon_prompts(cfg, task, seed)?;
            let flat: Vec<PromptBatch> = grouped.iter().flatten().cloned().collect();
            let q = predict_queries(predictor, &flat)?;
            let errors: Vec<Vec<Vec<f64>>> = q
                .chunks(cfg.n_batches)
                .map(|c| c.iter().map(|p| p.sq_errors.clone()).collect())
                .collect();
            epsilon_from_errors(&errors, cfg.degree)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    Ok(EpsilonResult { per_seed, mean })
}

/// Outcome of comparing base and pruned models function by function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub label: String,
    pub n: usize,
    pub both: usize,
    pub only_base: usize,
    pub only_pruned: usize,
    pub neither: usize,
    /// Mean base-model MSE over functions.
    pub acc_mean_base_mse: f64,
    /// The value each function's MSE is compared against (`<`).
    pub threshold: f64,
    pub mean_pruned_mse: f64,
    /// `mean_pruned_mse / acc_mean_base_mse`.
    pub agg_ratio: f64,
    pub dropped: Vec<usize>,
}

/// Classifies functions by whether each model's MSE is below the mean
/// base-model MSE.
pub fn threshold_analysis(
    label: &str,
    base: &[f64],
    pruned: &[f64],
    dropped: &BTreeSet<usize>,
) -> Result<ThresholdRow> {
    if base.len() != pruned.len() || base.is_empty() {
        return Err(invalid(
            "threshold analysis",
            format!("{} base vs {} pruned MSEs", base.len(), pruned.len()),
        ));
    }
    let n = base.len();
    let threshold = base.iter().sum::<f64>() / n as f64;
    let mean_pruned = pruned.iter().sum::<f64>() / n as f64;
    let (mut both, mut only_base, mut only_pruned, mut neither) = (0, 0, 0, 0);
    for (&b, &p) in base.iter().zip(pruned) {
        match (b < threshold, p < threshold) {
            (true, true) => both += 1,
            (true, false) => only_base += 1,
            (false, true) => only_pruned += 1,
            (false, false) => neither += 1,
        }
    }
    Ok(ThresholdRow {
        label: label.to_string(),
        n,
        both,
        only_base,
        only_pruned,
        neither,
        acc_mean_base_mse: threshold,
        threshold,
        mean_pruned_mse: mean_pruned,
        agg_ratio: mean_pruned / threshold,
        dropped: dropped.iter().copied().collect(),
    })
}

/// Scored MSE per function, averaged over that function's prompts.
pub fn per_function_mse(
    predictor: &(impl Predictor + ?Sized),
    grouped: &[Vec<PromptBatch>],
) -> Result<Vec<f64>> {
    let flat: Vec<PromptBatch> = grouped.iter().flatten().cloned().collect();
    let q = predict_queries(predictor, &flat)?;
    let mut out = Vec::with_capacity(grouped.len());
    let mut at = 0;
    for g in grouped {
        let chunk = &q[at..at + g.len()];
        at += g.len();
        let m: Vec<f64> = chunk
            .iter()
            .map(|p| p.scored_mse().ok_or_else(|| invalid("threshold", "prompt has no scored positions")))
            .collect::<Result<_>>()?;
        out.push(m.iter().sum::<f64>() / m.len() as f64);
    }
    Ok(out)
}

/// Functions and prompts for a threshold comparison: `n_functions` targets
/// with `n_batches` prompts of `n_points` each, from one seed.
pub fn function_set(task: &TaskSpec, n_functions: usize, n_batches: usize, n_points: usize, seed: u64) -> Result<Vec<Vec<PromptBatch>>> {
    let cfg = EvalConfig {
        seeds: vec![seed],
        n_functions,
        n_batches,
        n_points,
        degree: task.family.scoring_degree(),
    };
    cfg.validate()?;
    epsilon_prompts(&cfg, task, seed)
}

/// Base and pruned per-function MSEs on a shared function set.
pub fn threshold_for_model(
    label: &str,
    model: &Model,
    dropped: &BTreeSet<usize>,
    grouped: &[Vec<PromptBatch>],
) -> Result<ThresholdRow> {
    let base = per_function_mse(&model.unmasked(), grouped)?;
    let pruned = per_function_mse(
        &model.masked(InterventionSpec::drop_layers(dropped.iter().copied())),
        grouped,
    )?;
    threshold_analysis(label, &base, &pruned, dropped)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub metric: f64,
}

/// Validation metric with layer `layer`'s residual update scaled by each α.
pub fn alpha_sweep(
    model: &Model,
    layer: usize,
    alphas: &[f64],
    prompts: &[PromptBatch],
) -> Result<Vec<AlphaPoint>> {
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(invalid("alpha sweep", format!("alpha {a} outside [0, 1]")));
    }
    alphas
        .iter()
        .map(|&alpha| {
            let spec = InterventionSpec::none().with_alpha(layer, alpha);
            Ok(AlphaPoint {
                alpha,
                metric: evaluate_masked(model, &spec, prompts)?,
            })
        })
        .collect()
}

/// Predicts the exact labels.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, prompts: &[PromptBatch]) -> Result<Vec<Vec<f64>>> {
        Ok(prompts
            .iter()
            .map(|p| p.xs.iter().map(|&x| p.function.eval(x)).collect())
            .collect())
    }
}

/// Always predicts `y + offset`, giving squared error `offset²` everywhere.
#[derive(Debug, Clone, Copy)]
pub struct OffsetPredictor(pub f64);

impl Predictor for OffsetPredictor {
    fn predict(&self, prompts: &[PromptBatch]) -> Result<Vec<Vec<f64>>> {
        Ok(prompts
            .iter()
            .map(|p| p.ys.iter().map(|y| y + self.0).collect())
            .collect())
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_and_constant_error() {
        let cfg = EvalConfig {
            seeds: vec![1, 2],
            n_functions: 3,
            n_batches: 2,
            n_points: 6,
            degree: 1,
        };
        let task = TaskSpec::linear(1.0).unwrap();
        let r = epsilon_sigma(&OraclePredictor, &cfg, &task).unwrap();
        assert_eq!(r.mean, 0.0);
        // 0.5² = 0.25 exactly in binary.
        let r = epsilon_sigma(&OffsetPredictor(0.5), &cfg, &task).unwrap();
        assert_eq!(r.per_seed, vec![0.25, 0.25]);
    }

    #[test]
    fn tiny_hand_case() {
        // N = 1, N_b = 1, N_p = 4, n = 1: positions 3 and 4 are scored.
        let errors = vec![vec![vec![9.0, 9.0, 1.0, 3.0]]];
        assert_eq!(epsilon_from_errors(&errors, 1).unwrap(), 2.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = EvalConfig::paper();
        cfg.n_points = 2;
        assert!(cfg.validate().is_err());
        cfg.n_points = 41;
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn threshold_enumeration() {
        let none = BTreeSet::new();
        let r = threshold_analysis("x", &[0.5, 1.5], &[0.5, 0.5], &none).unwrap();
        assert_eq!(r.threshold, 1.0);
        assert_eq!((r.both, r.only_base, r.only_pruned, r.neither), (1, 0, 1, 0));
        let r = threshold_analysis("x", &[0.5, 1.5, 1.0], &[0.5, 1.5, 1.0], &none).unwrap();
        assert_eq!(r.only_base + r.only_pruned, 0);
        assert_eq!(r.both + r.only_base + r.only_pruned + r.neither, r.n);
    }

    #[test]
    fn alpha_range_checked() {
        let m = Model::init(crate::model::ModelConfig { n_layers: 1, n_heads: 1, d_model: 4, max_positions: 9, layernorm_eps: 1e-5 }, 0).unwrap();
        let p = TaskSpec::linear(1.0).unwrap().sample_prompts(2, 3, 0).unwrap();
        assert!(alpha_sweep(&m, 0, &[1.2], &p).is_err());
        let r = alpha_sweep(&m, 0, &[1.0, 0.0], &p).unwrap();
        assert_eq!(r[0].metric, evaluate_masked(&m, &InterventionSpec::none(), &p).unwrap());
        assert_eq!(r[1].metric, evaluate_masked(&m, &InterventionSpec::drop_layers([0]), &p).unwrap());
    }
}
