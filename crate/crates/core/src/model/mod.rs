// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer for scalar in-context regression.
//!
//! Blocks are pre-norm with a GELU MLP of width `4 * d_model`, learned
//! absolute positions and a final layer norm before the scalar readout.
//! Parameters are generic over their storage so the same forward code runs
//! eagerly on [`Tensor`]s and on a gradient [`Tape`](talelab_numkernel::Tape).

mod checkpoint;
mod forward;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};
use talelab_numkernel::Tensor;

use crate::error::{invalid, Result};

pub(crate) use forward::{head_graph, x_rows};
pub use checkpoint::{load_checkpoint, read_matrix, save_checkpoint, write_matrix};
pub use forward::{
    encode_prompt, forward, forward_graph, forward_prompts, predict_queries, ForwardTrace, InterventionSpec,
    MaskedModel, Predictor, QueryPredictions,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub max_positions: usize,
    #[serde(default = "default_eps")]
    pub layernorm_eps: f64,
}

fn default_eps() -> f64 {
    1e-5
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    /// 12 layers, 8 heads, width 256.
    pub fn paper() -> Self {
        Self {
            n_layers: 12,
            n_heads: 8,
            d_model: 256,
            max_positions: 83,
            layernorm_eps: default_eps(),
        }
    }

    /// Reduced model used for single-core runs.
    pub fn desk() -> Self {
        Self {
            n_layers: 8,
            n_heads: 4,
            d_model: 32,
            max_positions: 41,
            layernorm_eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(invalid("model config", "n_layers must be at least 1"));
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(invalid(
                "model config",
                format!(
                    "d_model {} must be a positive multiple of n_heads {}",
                    self.d_model, self.n_heads
                ),
            ));
        }
        if self.max_positions == 0 {
            return Err(invalid("model config", "max_positions must be positive"));
        }
        if !(self.layernorm_eps > 0.0 && self.layernorm_eps.is_finite()) {
            return Err(invalid("model config", "layernorm_eps must be positive"));
        }
        Ok(())
    }

    pub fn d_mlp(&self) -> usize {
        4 * self.d_model
    }

    /// Largest context length whose prompt fits in `max_positions`.
    pub fn max_context(&self) -> usize {
        (self.max_positions - 1) / 2
    }

    pub fn n_params(&self) -> usize {
        param_slots(self).iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

/// Whether a parameter is a hidden weight matrix (eligible for orthogonalized
/// updates) or something else (embeddings, norms, biases, readout).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    HiddenMatrix,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub w_up: T,
    pub b_up: T,
    pub w_down: T,
    pub b_down: T,
}

impl<T> LayerParams<T> {
    const NAMES: [&'static str; 12] = [
        "ln1_gain", "ln1_bias", "wq", "wk", "wv", "wo", "ln2_gain", "ln2_bias", "w_up", "b_up",
        "w_down", "b_down",
    ];

    fn refs(&self) -> [&T; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_up,
            &self.b_up,
            &self.w_down,
            &self.b_down,
        ]
    }

    fn muts(&mut self) -> [&mut T; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_up,
            &mut self.b_up,
            &mut self.w_down,
            &mut self.b_down,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = T>) -> Option<Self> {
        Some(Self {
            ln1_gain: it.next()?,
            ln1_bias: it.next()?,
            wq: it.next()?,
            wk: it.next()?,
            wv: it.next()?,
            wo: it.next()?,
            ln2_gain: it.next()?,
            ln2_bias: it.next()?,
            w_up: it.next()?,
            b_up: it.next()?,
            w_down: it.next()?,
            b_down: it.next()?,
        })
    }
}

/// All model weights in a fixed canonical order (see [`param_slots`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// `[1, d]` scalar-to-vector encoder.
    pub enc_weight: T,
    pub enc_bias: T,
    /// `[max_positions, d]`.
    pub positions: T,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_gain: T,
    pub lnf_bias: T,
    /// `[d, 1]` readout.
    pub dec_weight: T,
    pub dec_bias: T,
}

impl<T> ModelParams<T> {
    /// References in canonical order.
    pub fn tensors(&self) -> Vec<&T> {
        let mut out = vec![&self.enc_weight, &self.enc_bias, &self.positions];
        for l in &self.layers {
            out.extend(l.refs());
        }
        out.extend([&self.lnf_gain, &self.lnf_bias, &self.dec_weight, &self.dec_bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.enc_weight, &mut self.enc_bias, &mut self.positions];
        for l in &mut self.layers {
            out.extend(l.muts());
        }
        out.extend([
            &mut self.lnf_gain,
            &mut self.lnf_bias,
            &mut self.dec_weight,
            &mut self.dec_bias,
        ]);
        out
    }

    /// Rebuilds a parameter set from values in canonical order.
    pub fn from_canonical(n_layers: usize, values: Vec<T>) -> Option<Self> {
        let expected = 3 + 12 * n_layers + 4;
        if values.len() != expected {
            return None;
        }
        let mut it = values.into_iter();
        let enc_weight = it.next()?;
        let enc_bias = it.next()?;
        let positions = it.next()?;
        let layers = (0..n_layers)
            .map(|_| LayerParams::from_iter(&mut it))
            .collect::<Option<Vec<_>>>()?;
        Some(Self {
            enc_weight,
            enc_bias,
            positions,
            layers,
            lnf_gain: it.next()?,
            lnf_bias: it.next()?,
            dec_weight: it.next()?,
            dec_bias: it.next()?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        let n = self.layers.len();
        let values = self.tensors().into_iter().map(&mut f).collect();
        ModelParams::from_canonical(n, values).expect("canonical order preserved")
    }
}

/// Names, shapes and kinds of every parameter in canonical order.
pub fn param_slots(config: &ModelConfig) -> Vec<ParamSlot> {
    let d = config.d_model;
    let h = config.d_mlp();
    let slot = |name: String, shape: Vec<usize>, kind| ParamSlot { name, shape, kind };
    let other = ParamKind::Other;
    let hidden = ParamKind::HiddenMatrix;
    let mut out = vec![
        slot("enc_weight".into(), vec![1, d], other),
        slot("enc_bias".into(), vec![d], other),
        slot("positions".into(), vec![config.max_positions, d], other),
    ];
    for l in 0..config.n_layers {
        let shapes: [(Vec<usize>, ParamKind); 12] = [
            (vec![d], other),
            (vec![d], other),
            (vec![d, d], hidden),
            (vec![d, d], hidden),
            (vec![d, d], hidden),
            (vec![d, d], hidden),
            (vec![d], other),
            (vec![d], other),
            (vec![d, h], hidden),
            (vec![h], other),
            (vec![h, d], hidden),
            (vec![d], other),
        ];
        for (name, (shape, kind)) in LayerParams::<()>::NAMES.iter().zip(shapes) {
            out.push(slot(format!("layer{l}.{name}"), shape, kind));
        }
    }
    out.extend([
        slot("lnf_gain".into(), vec![d], other),
        slot("lnf_bias".into(), vec![d], other),
        slot("dec_weight".into(), vec![d, 1], other),
        slot("dec_bias".into(), vec![1], other),
    ]);
    out
}

/// A configured model with concrete weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

pub const INIT_STD: f64 = 0.02;

impl Model {
    /// Gaussian `N(0, 0.02²)` weights, zero biases, unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let values = param_slots(&config)
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = if s.name.ends_with("_gain") {
                    vec![1.0; n]
                } else if s.name.ends_with("_bias") || s.name.ends_with("b_up") || s.name.ends_with("b_down") {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                };
                Tensor::new(s.shape, data).expect("finite init")
            })
            .collect();
        let params = ModelParams::from_canonical(config.n_layers, values).expect("slot count");
        Ok(Self { config, params })
    }

    /// Wraps existing weights after checking every shape against `config`.
    pub fn from_params(config: ModelConfig, params: ModelParams<Tensor>) -> Result<Self> {
        config.validate()?;
        let slots = param_slots(&config);
        let tensors = params.tensors();
        if tensors.len() != slots.len() {
            return Err(invalid(
                "model params",
                format!("{} tensors for {} slots", tensors.len(), slots.len()),
            ));
        }
        for (t, s) in tensors.iter().zip(&slots) {
            if t.shape() != s.shape.as_slice() {
                return Err(invalid(
                    "model params",
                    format!("{} has shape {:?}, expected {:?}", s.name, t.shape(), s.shape),
                ));
            }
        }
        Ok(Self { config, params })
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    /// Baseline view with no intervention.
    pub fn unmasked(&self) -> MaskedModel<'_> {
        MaskedModel::new(self, InterventionSpec::none())
    }

    pub fn masked(&self, spec: InterventionSpec) -> MaskedModel<'_> {
        MaskedModel::new(self, spec)
    }
}
