// SPDX-License-Identifier: MIT OR Apache-2.0

//! Curriculum training of the regression transformer.

mod optim;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use talelab_numkernel::{Graph, KernelError, Tape, Tensor};

pub use optim::{
    adam_step, muon_direction, muon_step, newton_schulz_orthogonalize, orthogonality_error,
    AdamConfig, AdamState, MuonConfig, MuonState, NewtonSchulz,
};

use crate::error::{invalid, LabError, Result};
use crate::model::{
    forward_graph, head_graph, param_slots, predict_queries, x_rows, InterventionSpec, Model,
    ParamKind,
};
use crate::taskgen::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    /// Orthogonalized momentum on hidden matrices, Adam on everything else.
    Muon,
}

/// Context length `min(k_max, start + increment * floor(step / every))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Curriculum {
    pub start: usize,
    pub increment: usize,
    pub every: usize,
}

impl Default for Curriculum {
    fn default() -> Self {
        Self {
            start: 11,
            increment: 2,
            every: 2000,
        }
    }
}

impl Curriculum {
    pub fn context_at(&self, step: usize, k_max: usize) -> usize {
        let grown = self.start + self.increment * (step / self.every.max(1));
        grown.min(k_max)
    }
}

/// Learning-rate multiplier over training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warmup, then cosine decay to `final_ratio` of the peak.
    WarmupCosine { warmup: usize, final_ratio: f64 },
}

impl LrSchedule {
    pub fn multiplier(&self, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::WarmupCosine { warmup, final_ratio } => {
                if step < warmup {
                    return (step + 1) as f64 / warmup as f64;
                }
                let span = total.saturating_sub(warmup).max(1);
                let t = ((step - warmup) as f64 / span as f64).min(1.0);
                final_ratio + (1.0 - final_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    /// Adam learning rate (also used for Muon's non-matrix parameters).
    pub lr: f64,
    /// Learning rate for orthogonalized matrix updates.
    #[serde(default = "default_muon_lr")]
    pub muon_lr: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub k_max: usize,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub curriculum: Curriculum,
    pub seed: u64,
    /// Loss-curve granularity in steps.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub muon: MuonConfig,
    /// Held-out prompts scored after training (drawn at `k_max`).
    #[serde(default = "default_validation_prompts")]
    pub validation_prompts: usize,
    #[serde(default = "default_validation_seed")]
    pub validation_seed: u64,
}

fn default_muon_lr() -> f64 {
    0.02
}
fn default_log_every() -> usize {
    100
}
fn default_validation_prompts() -> usize {
    256
}
fn default_validation_seed() -> u64 {
    0x7a1e_5eed
}

impl TrainConfig {
    /// Full-length schedule: batch 64, 500k steps, curriculum 11 → 40.
    pub fn paper() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            lr: 1e-4,
            muon_lr: default_muon_lr(),
            batch_size: 64,
            total_steps: 500_000,
            k_max: 40,
            schedule: LrSchedule::Constant,
            curriculum: Curriculum::default(),
            seed: 0,
            log_every: default_log_every(),
            adam: AdamConfig::default(),
            muon: MuonConfig::default(),
            validation_prompts: default_validation_prompts(),
            validation_seed: default_validation_seed(),
        }
    }

    /// Single-core schedule: batch 16, 20k steps, curriculum 11 → 20, 500
    /// warmup steps then cosine decay to 5% of the peak rate.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            total_steps: 20_000,
            k_max: 20,
            curriculum: Curriculum {
                start: 11,
                increment: 2,
                every: 1000,
            },
            log_every: 500,
            schedule: LrSchedule::WarmupCosine {
                warmup: 500,
                final_ratio: 0.05,
            },
            ..Self::paper()
        }
    }

    pub fn with_optimizer(self, optimizer: OptimizerKind) -> Self {
        Self { optimizer, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("train config", format!("lr must be positive, got {}", self.lr)));
        }
        if self.optimizer == OptimizerKind::Muon && !(self.muon_lr > 0.0 && self.muon_lr.is_finite()) {
            return Err(invalid("train config", "muon_lr must be positive"));
        }
        if let LrSchedule::WarmupCosine { final_ratio, .. } = self.schedule {
            if !(0.0..=1.0).contains(&final_ratio) {
                return Err(invalid("train config", "schedule final_ratio must lie in [0, 1]"));
            }
        }
        if self.batch_size == 0 {
            return Err(invalid("train config", "batch_size must be positive"));
        }
        if self.curriculum.start > self.k_max {
            return Err(invalid(
                "train config",
                format!(
                    "curriculum start {} exceeds k_max {}",
                    self.curriculum.start, self.k_max
                ),
            ));
        }
        if self.curriculum.every == 0 || self.log_every == 0 {
            return Err(invalid("train config", "curriculum.every and log_every must be positive"));
        }
        Ok(())
    }
}

/// Mean training loss over one logging interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    /// Last step of the interval (1-based count of completed steps).
    pub step: usize,
    pub loss: f64,
    pub context_length: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<LossPoint>,
    /// Mean squared error on the held-out set over scored positions.
    pub validation_mse: f64,
}

/// Mean squared error over prediction positions.
pub fn training_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(invalid("training loss", "no prediction positions"));
    }
    if predictions.len() != targets.len() {
        return Err(invalid(
            "training loss",
            format!("{} predictions vs {} targets", predictions.len(), targets.len()),
        ));
    }
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / predictions.len() as f64)
}

enum OptState {
    Adam(AdamState),
    Muon {
        matrices: Vec<usize>,
        others: Vec<usize>,
        muon: MuonState,
        adam: AdamState,
    },
}

impl OptState {
    fn new(model: &Model, kind: OptimizerKind) -> Self {
        let tensors = model.params.tensors();
        match kind {
            OptimizerKind::Adam => Self::Adam(AdamState::for_params(tensors)),
            OptimizerKind::Muon => {
                let kinds: Vec<ParamKind> =
                    param_slots(&model.config).iter().map(|s| s.kind).collect();
                let (matrices, others): (Vec<usize>, Vec<usize>) =
                    (0..kinds.len()).partition(|&i| kinds[i] == ParamKind::HiddenMatrix);
                let muon = MuonState::for_params(matrices.iter().map(|&i| tensors[i]));
                let adam = AdamState::for_params(others.iter().map(|&i| tensors[i]));
                Self::Muon {
                    matrices,
                    others,
                    muon,
                    adam,
                }
            }
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[Tensor], cfg: &TrainConfig, scale: f64) -> Result<()> {
        let (lr, muon_lr) = (cfg.lr * scale, cfg.muon_lr * scale);
        let mut params = model.params.tensors_mut();
        match self {
            Self::Adam(st) => {
                let g: Vec<&Tensor> = grads.iter().collect();
                adam_step(&mut params, &g, st, lr, &cfg.adam)
            }
            Self::Muon {
                matrices,
                others,
                muon,
                adam,
            } => {
                let mut slots: Vec<Option<&mut Tensor>> = params.into_iter().map(Some).collect();
                let mut pick = |idx: &[usize]| -> Vec<&mut Tensor> {
                    idx.iter().map(|&i| slots[i].take().expect("disjoint slots")).collect()
                };
                let mut mp = pick(matrices);
                let mut op = pick(others);
                let mg: Vec<&Tensor> = matrices.iter().map(|&i| &grads[i]).collect();
                let og: Vec<&Tensor> = others.iter().map(|&i| &grads[i]).collect();
                muon_step(&mut mp, &mg, muon, muon_lr, &cfg.muon)?;
                adam_step(&mut op, &og, adam, lr, &cfg.adam)
            }
        }
    }
}

/// Loss and parameter gradients (canonical order) on one batch of prompts
/// sharing a context length.
pub fn loss_and_gradients(model: &Model, tokens: &[f64], targets: &[f64], batch: usize) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = model.params.map(|t| tape.leaf(t.clone()));
    let none = InterventionSpec::none();
    let h = forward_graph(&mut tape, &vars, &model.config, &none, tokens, batch, |_, _, _| {})?;
    let rows = x_rows(batch, tokens.len() / batch);
    let pred = head_graph(&mut tape, &vars, &model.config, &h, &rows)?;
    let loss = tape.mse(&pred, targets)?;
    let value = tape.value(&loss).scalar_value()?;
    let mut grads = tape.backward(loss)?;
    let g = vars
        .tensors()
        .into_iter()
        .map(|v| grads.take(*v).expect("every parameter is a leaf"))
        .collect();
    Ok((value, g))
}

/// Trains with the default no-op progress hook.
pub fn train(model: Model, cfg: &TrainConfig, task: &TaskSpec) -> Result<TrainOutcome> {
    train_with(model, cfg, task, |_| {})
}

/// Trains `model`, calling `on_log` at every loss-curve point. Prompts are
/// resampled every step from a generator seeded with `cfg.seed`.
pub fn train_with(
    mut model: Model,
    cfg: &TrainConfig,
    task: &TaskSpec,
    mut on_log: impl FnMut(&LossPoint),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    task.validate()?;
    if cfg.k_max > model.config.max_context() {
        return Err(invalid(
            "train config",
            format!(
                "k_max {} needs more than {} positions",
                cfg.k_max, model.config.max_positions
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptState::new(&model, cfg.optimizer);
    let mut curve = Vec::new();
    let (mut acc, mut n_acc) = (0.0, 0usize);

    for step in 0..cfg.total_steps {
        let k = cfg.curriculum.context_at(step, cfg.k_max);
        let mut tokens = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..cfg.batch_size {
            let p = task.sample_prompt(k, &mut rng)?;
            tokens.extend(p.tokens());
            targets.extend_from_slice(&p.ys);
        }
        let (loss, grads) = loss_and_gradients(&model, &tokens, &targets, cfg.batch_size)
            .map_err(|e| match e {
                LabError::Kernel(KernelError::NonFinite { op }) => LabError::Diverged {
                    step,
                    detail: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
        if !loss.is_finite() {
            return Err(LabError::Diverged {
                step,
                detail: format!("loss {loss}"),
            });
        }
        opt.step(&mut model, &grads, cfg, cfg.schedule.multiplier(step, cfg.total_steps))?;
        if model.params.tensors().iter().any(|t| !t.is_finite()) {
            return Err(LabError::Diverged {
                step,
                detail: "non-finite parameter after update".into(),
            });
        }
        acc += loss;
        n_acc += 1;
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.total_steps {
            let point = LossPoint {
                step: step + 1,
                loss: acc / n_acc as f64,
                context_length: k,
            };
            on_log(&point);
            curve.push(point);
            acc = 0.0;
            n_acc = 0;
        }
    }

    let validation_mse = validation_mse(&model, cfg, task)?;
    Ok(TrainOutcome {
        model,
        curve,
        validation_mse,
    })
}

/// Mean of per-prompt scored MSEs on the fixed held-out set; `NaN` when the
/// set is disabled.
pub fn validation_mse(model: &Model, cfg: &TrainConfig, task: &TaskSpec) -> Result<f64> {
    if cfg.validation_prompts == 0 {
        return Ok(f64::NAN);
    }
    let prompts = task.sample_prompts(cfg.validation_prompts, cfg.k_max, cfg.validation_seed)?;
    let per_prompt: Vec<f64> = predict_queries(model, &prompts)?
        .iter()
        .filter_map(|q| q.scored_mse())
        .collect();
    if per_prompt.is_empty() {
        return Err(invalid("validation", "no scored positions at k_max"));
    }
    Ok(per_prompt.iter().sum::<f64>() / per_prompt.len() as f64)
}

/// Writes `step,loss,context_length`.
pub fn write_loss_curve(path: impl AsRef<Path>, curve: &[LossPoint]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss", "context_length"])?;
    for p in curve {
        w.write_record([
            p.step.to_string(),
            format!("{:e}", p.loss),
            p.context_length.to_string(),
        ])?;
    }
    w.flush().map_err(crate::error::io_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_cosine_endpoints() {
        let s = LrSchedule::WarmupCosine {
            warmup: 10,
            final_ratio: 0.1,
        };
        assert_eq!(s.multiplier(0, 110), 0.1);
        assert_eq!(s.multiplier(9, 110), 1.0);
        assert!((s.multiplier(10, 110) - 1.0).abs() < 1e-15);
        assert!((s.multiplier(60, 110) - 0.55).abs() < 1e-12);
        assert!((s.multiplier(110, 110) - 0.1).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.multiplier(5, 10), 1.0);
    }
    use crate::model::ModelConfig;

    fn tiny_model() -> Model {
        Model::init(
            ModelConfig {
                n_layers: 2,
                n_heads: 2,
                d_model: 8,
                max_positions: 23,
                layernorm_eps: 1e-5,
            },
            1,
        )
        .unwrap()
    }

    fn tiny_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch_size: 4,
            total_steps: steps,
            k_max: 6,
            curriculum: Curriculum {
                start: 3,
                increment: 1,
                every: 5,
            },
            log_every: 5,
            validation_prompts: 8,
            ..TrainConfig::paper()
        }
    }

    #[test]
    fn loss_examples() {
        assert_eq!(training_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(training_loss(&[2.0, 3.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(training_loss(&[0.5, 1.5], &[0.0, 0.0]).unwrap(), 1.25);
        assert!(training_loss(&[], &[]).is_err());
    }

    #[test]
    fn curriculum_schedule() {
        let c = Curriculum::default();
        assert_eq!(c.context_at(0, 40), 11);
        assert_eq!(c.context_at(1999, 40), 11);
        assert_eq!(c.context_at(2000, 40), 13);
        assert_eq!(c.context_at(1_000_000, 40), 40);
    }

    #[test]
    fn zero_steps_leave_params() {
        let m = tiny_model();
        let out = train(m.clone(), &tiny_cfg(0), &TaskSpec::linear(1.0).unwrap()).unwrap();
        assert_eq!(out.model, m);
        assert!(out.curve.is_empty());
    }

    #[test]
    fn seeded_runs_match() {
        let task = TaskSpec::linear(1.0).unwrap();
        for opt in [OptimizerKind::Adam, OptimizerKind::Muon] {
            let cfg = tiny_cfg(10).with_optimizer(opt);
            let a = train(tiny_model(), &cfg, &task).unwrap();
            let b = train(tiny_model(), &cfg, &task).unwrap();
            assert_eq!(a.curve, b.curve);
            assert_eq!(a.model, b.model);
            assert_eq!(a.curve.len(), 2);
            assert_eq!(a.curve[1].context_length, 4);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let task = TaskSpec::linear(1.0).unwrap();
        let cfg = TrainConfig { lr: 0.0, ..tiny_cfg(1) };
        assert!(train(tiny_model(), &cfg, &task).is_err());
        let cfg = TrainConfig { k_max: 2, ..tiny_cfg(1) };
        assert!(train(tiny_model(), &cfg, &task).is_err());
        let cfg = TrainConfig { k_max: 40, ..tiny_cfg(1) };
        assert!(train(tiny_model(), &cfg, &task).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let task = TaskSpec::linear(1.0).unwrap();
        let cfg = TrainConfig { lr: 1e300, ..tiny_cfg(5) };
        match train(tiny_model(), &cfg, &task) {
            Err(LabError::Diverged { step, .. }) => assert!(step < 5),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
