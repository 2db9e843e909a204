// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy task-aware layer elimination.
//!
//! Each round scores every remaining layer's single removal on a fixed
//! validation set and drops the best one if it beats the current metric by
//! more than `epsilon_improve`. Ties go to the lowest layer index.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Result};
use crate::model::{predict_queries, InterventionSpec, Model, Predictor};
use crate::taskgen::PromptBatch;

/// A lower-is-better score for a set of removed layers.
pub trait MaskedMetric: Sync {
    fn n_layers(&self) -> usize;
    fn metric(&self, dropped: &BTreeSet<usize>) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    #[serde(default)]
    pub epsilon_improve: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            epsilon_improve: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub layer: usize,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneResult {
    /// Layers in removal order.
    pub dropped_layers: Vec<usize>,
    /// One candidate table per round; the last round found no improvement.
    pub per_round: Vec<Vec<Candidate>>,
    pub baseline_metric: f64,
    pub best_metric: f64,
    pub best_over_full_ratio: f64,
}

impl PruneResult {
    pub fn dropped_set(&self) -> BTreeSet<usize> {
        self.dropped_layers.iter().copied().collect()
    }

    pub fn spec(&self) -> InterventionSpec {
        InterventionSpec::drop_layers(self.dropped_layers.iter().copied())
    }

    /// Metric after each accepted removal, starting with the baseline.
    pub fn metric_trace(&self) -> Vec<f64> {
        let mut out = vec![self.baseline_metric];
        for (round, &layer) in self.per_round.iter().zip(&self.dropped_layers) {
            let m = round
                .iter()
                .find(|c| c.layer == layer)
                .map(|c| c.metric)
                .expect("chosen layer is in its round table");
            out.push(m);
        }
        out
    }

    /// Writes `round,layer,metric,chosen`.
    pub fn write_rounds_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["round", "layer", "metric", "chosen"])?;
        for (r, table) in self.per_round.iter().enumerate() {
            let chosen = self.dropped_layers.get(r);
            for c in table {
                w.write_record([
                    r.to_string(),
                    c.layer.to_string(),
                    format!("{:e}", c.metric),
                    (Some(&c.layer) == chosen).to_string(),
                ])?;
            }
        }
        w.flush().map_err(io_err(path))?;
        Ok(())
    }
}

pub fn greedy_prune(metric: &impl MaskedMetric, cfg: &PruneConfig) -> Result<PruneResult> {
    if !(cfg.epsilon_improve >= 0.0) {
        return Err(invalid("prune config", "epsilon_improve must be non-negative"));
    }
    let n = metric.n_layers();
    let mut dropped = BTreeSet::new();
    let baseline = metric.metric(&dropped)?;
    let mut current = baseline;
    let mut order = Vec::new();
    let mut per_round = Vec::new();
    loop {
        let remaining: Vec<usize> = (0..n).filter(|l| !dropped.contains(l)).collect();
        let table: Vec<Candidate> = remaining
            .par_iter()
            .map(|&layer| {
                let mut trial = dropped.clone();
                trial.insert(layer);
                Ok(Candidate {
                    layer,
                    metric: metric.metric(&trial)?,
                })
            })
            .collect::<Result<_>>()?;
        // The table is in ascending layer order, so a strict `<` keeps the
        // lowest index among ties.
        let best = table
            .iter()
            .fold(None::<Candidate>, |acc, c| match acc {
                Some(b) if b.metric <= c.metric => Some(b),
                _ if c.metric.is_nan() => acc,
                _ => Some(*c),
            });
        per_round.push(table);
        match best {
            Some(b) if b.metric < current - cfg.epsilon_improve => {
                dropped.insert(b.layer);
                order.push(b.layer);
                current = b.metric;
            }
            _ => break,
        }
    }
    Ok(PruneResult {
        dropped_layers: order,
        per_round,
        baseline_metric: baseline,
        best_metric: current,
        best_over_full_ratio: current / baseline,
    })
}

/// Mean over prompts of each prompt's scored-position MSE.
pub fn evaluate_predictor(
    predictor: &(impl Predictor + ?Sized),
    prompts: &[PromptBatch],
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(invalid("evaluation", "empty validation set"));
    }
    let per: Vec<f64> = predict_queries(predictor, prompts)?
        .iter()
        .map(|q| {
            q.scored_mse()
                .ok_or_else(|| invalid("evaluation", "prompt has no scored positions"))
        })
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub fn evaluate_masked(model: &Model, spec: &InterventionSpec, prompts: &[PromptBatch]) -> Result<f64> {
    evaluate_predictor(&model.masked(spec.clone()), prompts)
}

/// Validation MSE of a model under layer-drop masks.
#[derive(Debug, Clone)]
pub struct ValidationMetric<'a> {
    pub model: &'a Model,
    pub prompts: &'a [PromptBatch],
    /// Applied underneath every mask (e.g. injected maps); usually empty.
    pub base: InterventionSpec,
}

impl<'a> ValidationMetric<'a> {
    pub fn new(model: &'a Model, prompts: &'a [PromptBatch]) -> Self {
        Self {
            model,
            prompts,
            base: InterventionSpec::none(),
        }
    }
}

impl MaskedMetric for ValidationMetric<'_> {
    fn n_layers(&self) -> usize {
        self.model.n_layers()
    }

    fn metric(&self, dropped: &BTreeSet<usize>) -> Result<f64> {
        let spec = dropped
            .iter()
            .fold(self.base.clone(), |s, &l| s.with_dropped(l));
        evaluate_masked(self.model, &spec, self.prompts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    /// Metric looked up from an explicit table over masks.
    struct Table {
        n: usize,
        values: BTreeMap<Vec<usize>, f64>,
        default: f64,
    }

    impl MaskedMetric for Table {
        fn n_layers(&self) -> usize {
            self.n
        }
        fn metric(&self, dropped: &BTreeSet<usize>) -> Result<f64> {
            let key: Vec<usize> = dropped.iter().copied().collect();
            Ok(*self.values.get(&key).unwrap_or(&self.default))
        }
    }

    #[test]
    fn three_layer_stub() {
        let mut values = BTreeMap::new();
        values.insert(vec![], 1.0);
        values.insert(vec![0], 1.2);
        values.insert(vec![1], 0.9);
        values.insert(vec![2], 0.5);
        values.insert(vec![0, 2], 0.6);
        values.insert(vec![1, 2], 0.5);
        let t = Table {
            n: 3,
            values,
            default: 2.0,
        };
        let r = greedy_prune(&t, &PruneConfig::default()).unwrap();
        assert_eq!(r.dropped_layers, vec![2]);
        assert_eq!(r.best_over_full_ratio, 0.5);
        assert_eq!(r.per_round.len(), 2);
        assert_eq!(r.metric_trace(), vec![1.0, 0.5]);
    }

    #[test]
    fn nothing_helps() {
        let t = Table {
            n: 4,
            values: [(vec![], 1.0)].into_iter().collect(),
            default: 1.5,
        };
        let r = greedy_prune(&t, &PruneConfig::default()).unwrap();
        assert!(r.dropped_layers.is_empty());
        assert_eq!(r.best_over_full_ratio, 1.0);
        assert_eq!(r.per_round.len(), 1);
    }

    #[test]
    fn ties_take_lowest_index_and_epsilon_blocks() {
        let t = Table {
            n: 3,
            values: [(vec![], 1.0), (vec![1], 0.8), (vec![2], 0.8)].into_iter().collect(),
            default: 3.0,
        };
        let r = greedy_prune(&t, &PruneConfig::default()).unwrap();
        assert_eq!(r.dropped_layers, vec![1]);
        let r = greedy_prune(&t, &PruneConfig { epsilon_improve: 0.25 }).unwrap();
        assert!(r.dropped_layers.is_empty());
    }

    #[test]
    fn can_drop_everything() {
        // Metric equals number of kept layers.
        struct Kept(usize);
        impl MaskedMetric for Kept {
            fn n_layers(&self) -> usize {
                self.0
            }
            fn metric(&self, d: &BTreeSet<usize>) -> Result<f64> {
                Ok((self.0 - d.len()) as f64 + 1.0)
            }
        }
        let r = greedy_prune(&Kept(3), &PruneConfig::default()).unwrap();
        assert_eq!(r.dropped_layers, vec![0, 1, 2]);
        assert_eq!(r.per_round.len(), 4);
        assert!(r.per_round[3].is_empty());
    }
}
