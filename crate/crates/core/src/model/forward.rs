// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use talelab_numkernel::{AttentionShape, Eager, Graph, Tensor};

use super::{Model, ModelConfig, ModelParams};
use crate::error::{invalid, Result};
use crate::taskgen::PromptBatch;

/// Per-layer edits applied during a forward pass.
///
/// A dropped layer is a residual passthrough. A kept layer computes
/// `h + alpha * delta(h)`. An injected map `M` replaces the layer's output
/// `h` with `M h`, after the residual add.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InterventionSpec {
    dropped: BTreeSet<usize>,
    alpha: BTreeMap<usize, f64>,
    injected: BTreeMap<usize, Tensor>,
}

impl InterventionSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn drop_layers(layers: impl IntoIterator<Item = usize>) -> Self {
        Self {
            dropped: layers.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn with_dropped(mut self, layer: usize) -> Self {
        self.dropped.insert(layer);
        self
    }

    pub fn with_alpha(mut self, layer: usize, alpha: f64) -> Self {
        self.alpha.insert(layer, alpha);
        self
    }

    /// Injects `map` (`d x d`, acting on column vectors) after `layer`.
    pub fn with_injection(mut self, layer: usize, map: Tensor) -> Self {
        self.injected.insert(layer, map);
        self
    }

    pub fn dropped(&self) -> &BTreeSet<usize> {
        &self.dropped
    }

    pub fn is_dropped(&self, layer: usize) -> bool {
        self.dropped.contains(&layer)
    }

    pub fn alpha(&self, layer: usize) -> f64 {
        self.alpha.get(&layer).copied().unwrap_or(1.0)
    }

    pub fn injection(&self, layer: usize) -> Option<&Tensor> {
        self.injected.get(&layer)
    }

    pub fn is_identity(&self) -> bool {
        self.dropped.is_empty() && self.alpha.values().all(|&a| a == 1.0) && self.injected.is_empty()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let n = config.n_layers;
        let check = |l: usize| {
            if l >= n {
                Err(invalid(
                    "intervention",
                    format!("layer {l} out of range for {n} layers"),
                ))
            } else {
                Ok(())
            }
        };
        for &l in &self.dropped {
            check(l)?;
        }
        for (&l, &a) in &self.alpha {
            check(l)?;
            if !(0.0..=1.0).contains(&a) {
                return Err(invalid(
                    "intervention",
                    format!("alpha {a} at layer {l} outside [0, 1]"),
                ));
            }
        }
        for (&l, m) in &self.injected {
            check(l)?;
            if m.shape() != [config.d_model, config.d_model] {
                return Err(invalid(
                    "intervention",
                    format!(
                        "injected map at layer {l} has shape {:?}, expected {d}x{d}",
                        m.shape(),
                        d = config.d_model
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Compact identifier such as `drop[1,3]` or `base`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if !self.dropped.is_empty() {
            let ids: Vec<String> = self.dropped.iter().map(|l| l.to_string()).collect();
            parts.push(format!("drop[{}]", ids.join(",")));
        }
        for (l, a) in &self.alpha {
            if *a != 1.0 {
                parts.push(format!("alpha{l}={a}"));
            }
        }
        for l in self.injected.keys() {
            parts.push(format!("inject{l}"));
        }
        if parts.is_empty() {
            "base".to_string()
        } else {
            parts.join("+")
        }
    }
}

/// Hidden states of one prompt at every layer boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `n_layers + 1` matrices of shape `[seq_len, d_model]`; index 0 is the
    /// embedding output, index `l + 1` the state after layer `l`.
    pub hidden: Vec<Tensor>,
    /// Scalar prediction at each x-token position.
    pub predictions: Vec<f64>,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.hidden[0].rows()
    }

    pub fn n_layers(&self) -> usize {
        self.hidden.len() - 1
    }

    /// State of token `pos` after layer boundary `layer`.
    pub fn state(&self, layer: usize, pos: usize) -> &[f64] {
        self.hidden[layer].row(pos)
    }

    pub fn last_token(&self, layer: usize) -> &[f64] {
        self.state(layer, self.seq_len() - 1)
    }
}

/// Embedding of a token sequence: `x * W_enc + b_enc + P[pos]`.
pub fn encode_prompt(model: &Model, tokens: &[f64]) -> Result<Tensor> {
    check_tokens(&model.config, tokens.len())?;
    let mut g = Eager;
    let p = &model.params;
    let e = g.embed_scalar(tokens, &p.enc_weight, &p.enc_bias)?;
    Ok(g.add_positional(&e, &p.positions, tokens.len())?)
}

fn check_tokens(config: &ModelConfig, seq_len: usize) -> Result<()> {
    if seq_len == 0 {
        return Err(invalid("prompt", "empty token sequence"));
    }
    if seq_len > config.max_positions {
        return Err(invalid(
            "prompt",
            format!(
                "sequence length {seq_len} exceeds max_positions {}",
                config.max_positions
            ),
        ));
    }
    Ok(())
}

/// Runs the residual stack over `batch` sequences of equal length stored
/// back to back in `tokens`. Returns the last residual state (before the final
/// norm). `observe` sees the state at every layer boundary.
pub fn forward_graph<G: Graph>(
    g: &mut G,
    params: &ModelParams<G::Node>,
    config: &ModelConfig,
    spec: &InterventionSpec,
    tokens: &[f64],
    batch: usize,
    mut observe: impl FnMut(&G, usize, &G::Node),
) -> Result<G::Node> {
    if batch == 0 || tokens.len() % batch != 0 {
        return Err(invalid(
            "forward",
            format!("{} tokens do not split into {batch} sequences", tokens.len()),
        ));
    }
    let seq_len = tokens.len() / batch;
    check_tokens(config, seq_len)?;
    let eps = config.layernorm_eps;
    let shape = AttentionShape {
        batch,
        seq_len,
        heads: config.n_heads,
    };

    let e = g.embed_scalar(tokens, &params.enc_weight, &params.enc_bias)?;
    let mut h = g.add_positional(&e, &params.positions, seq_len)?;
    observe(g, 0, &h);

    for (l, lp) in params.layers.iter().enumerate() {
        if !spec.is_dropped(l) {
            let a = g.layernorm(&h, &lp.ln1_gain, &lp.ln1_bias, eps)?;
            let q = g.matmul(&a, &lp.wq)?;
            let k = g.matmul(&a, &lp.wk)?;
            let v = g.matmul(&a, &lp.wv)?;
            let att = g.causal_attention(&q, &k, &v, shape)?;
            let o = g.matmul(&att, &lp.wo)?;
            let h1 = g.add(&h, &o)?;
            let m = g.layernorm(&h1, &lp.ln2_gain, &lp.ln2_bias, eps)?;
            let up = g.matmul(&m, &lp.w_up)?;
            let up = g.add(&up, &lp.b_up)?;
            let up = g.gelu(&up)?;
            let down = g.matmul(&up, &lp.w_down)?;
            let down = g.add(&down, &lp.b_down)?;
            let alpha = spec.alpha(l);
            h = if alpha == 1.0 {
                g.add(&h1, &down)?
            } else {
                let delta = g.add(&o, &down)?;
                let delta = g.scale(&delta, alpha)?;
                g.add(&h, &delta)?
            };
        }
        if let Some(map) = spec.injection(l) {
            let mt = g.constant(map.transpose());
            h = g.matmul(&h, &mt)?;
        }
        observe(g, l + 1, &h);
    }
    Ok(h)
}

/// Final norm and scalar readout at the given rows.
pub(crate) fn head_graph<G: Graph>(
    g: &mut G,
    params: &ModelParams<G::Node>,
    config: &ModelConfig,
    h: &G::Node,
    rows: &[usize],
) -> Result<G::Node> {
    let f = g.layernorm(h, &params.lnf_gain, &params.lnf_bias, config.layernorm_eps)?;
    Ok(g.readout(&f, &params.dec_weight, &params.dec_bias, rows)?)
}

/// Row indices of x tokens for `batch` sequences of length `seq_len`.
pub(crate) fn x_rows(batch: usize, seq_len: usize) -> Vec<usize> {
    (0..batch)
        .flat_map(|b| (0..seq_len).step_by(2).map(move |t| b * seq_len + t))
        .collect()
}

impl Model {
    /// Predictions at x positions for a final residual state `[seq_len, d]`.
    pub fn readout_from_hidden(&self, hidden: &Tensor) -> Result<Vec<f64>> {
        let rows = x_rows(1, hidden.rows());
        Ok(head_graph(&mut Eager, &self.params, &self.config, hidden, &rows)?.into_data())
    }

    /// Predictions at x positions for equal-length sequences.
    fn predict_batch(&self, spec: &InterventionSpec, tokens: &[f64], batch: usize) -> Result<Vec<f64>> {
        let mut g = Eager;
        let h = forward_graph(&mut g, &self.params, &self.config, spec, tokens, batch, |_, _, _| {})?;
        let rows = x_rows(batch, tokens.len() / batch);
        Ok(head_graph(&mut g, &self.params, &self.config, &h, &rows)?.into_data())
    }
}

/// Traced forward pass of one token sequence.
pub fn forward(model: &Model, spec: &InterventionSpec, tokens: &[f64]) -> Result<ForwardTrace> {
    spec.validate(&model.config)?;
    let mut traces = forward_traced_batch(model, spec, tokens, 1)?;
    Ok(traces.pop().expect("one trace"))
}

fn forward_traced_batch(
    model: &Model,
    spec: &InterventionSpec,
    tokens: &[f64],
    batch: usize,
) -> Result<Vec<ForwardTrace>> {
    let mut g = Eager;
    let mut states: Vec<Tensor> = Vec::with_capacity(model.n_layers() + 1);
    let h = forward_graph(&mut g, &model.params, &model.config, spec, tokens, batch, |_, _, h| {
        states.push(h.clone())
    })?;
    let seq_len = tokens.len() / batch;
    let rows = x_rows(batch, seq_len);
    let preds = head_graph(&mut g, &model.params, &model.config, &h, &rows)?.into_data();
    let d = model.config.d_model;
    let per = seq_len.div_ceil(2);
    Ok((0..batch)
        .map(|b| ForwardTrace {
            hidden: states
                .iter()
                .map(|s| {
                    let block = s.data()[b * seq_len * d..(b + 1) * seq_len * d].to_vec();
                    Tensor::new(vec![seq_len, d], block).expect("finite states")
                })
                .collect(),
            predictions: preds[b * per..(b + 1) * per].to_vec(),
        })
        .collect())
}

/// Prompts processed per eager forward call.
const EVAL_CHUNK: usize = 32;

/// Groups prompt indices by sequence length, in first-seen order, then splits
/// each group into chunks.
fn length_chunks(prompts: &[PromptBatch]) -> Vec<Vec<usize>> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, p) in prompts.iter().enumerate() {
        match groups.iter_mut().find(|(len, _)| *len == p.seq_len()) {
            Some((_, idx)) => idx.push(i),
            None => groups.push((p.seq_len(), vec![i])),
        }
    }
    groups
        .into_iter()
        .flat_map(|(_, idx)| idx.chunks(EVAL_CHUNK).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect()
}

fn stack_tokens(prompts: &[PromptBatch], idx: &[usize]) -> Vec<f64> {
    idx.iter().flat_map(|&i| prompts[i].tokens()).collect()
}

/// Traced forward passes for many prompts, in input order.
pub fn forward_prompts(
    model: &Model,
    spec: &InterventionSpec,
    prompts: &[PromptBatch],
) -> Result<Vec<ForwardTrace>> {
    spec.validate(&model.config)?;
    let chunks = length_chunks(prompts);
    let results: Vec<Vec<ForwardTrace>> = chunks
        .par_iter()
        .map(|idx| forward_traced_batch(model, spec, &stack_tokens(prompts, idx), idx.len()))
        .collect::<Result<_>>()?;
    let mut out: Vec<Option<ForwardTrace>> = vec![None; prompts.len()];
    for (idx, traces) in chunks.iter().zip(results) {
        for (&i, t) in idx.iter().zip(traces) {
            out[i] = Some(t);
        }
    }
    Ok(out.into_iter().map(|t| t.expect("every prompt traced")).collect())
}

/// Anything that maps prompts to predictions at their x positions.
pub trait Predictor: Sync {
    /// One vector per prompt, of length `prompt.n_points()`.
    fn predict(&self, prompts: &[PromptBatch]) -> Result<Vec<Vec<f64>>>;
}

/// A model paired with an intervention.
#[derive(Debug, Clone)]
pub struct MaskedModel<'a> {
    pub model: &'a Model,
    pub spec: InterventionSpec,
}

impl<'a> MaskedModel<'a> {
    pub fn new(model: &'a Model, spec: InterventionSpec) -> Self {
        Self { model, spec }
    }

    pub fn traces(&self, prompts: &[PromptBatch]) -> Result<Vec<ForwardTrace>> {
        forward_prompts(self.model, &self.spec, prompts)
    }
}

impl Predictor for MaskedModel<'_> {
    fn predict(&self, prompts: &[PromptBatch]) -> Result<Vec<Vec<f64>>> {
        self.spec.validate(&self.model.config)?;
        let chunks = length_chunks(prompts);
        let results: Vec<Vec<f64>> = chunks
            .par_iter()
            .map(|idx| {
                self.model
                    .predict_batch(&self.spec, &stack_tokens(prompts, idx), idx.len())
            })
            .collect::<Result<_>>()?;
        let mut out = vec![Vec::new(); prompts.len()];
        for (idx, preds) in chunks.iter().zip(results) {
            let per = preds.len() / idx.len();
            for (j, &i) in idx.iter().enumerate() {
                out[i] = preds[j * per..(j + 1) * per].to_vec();
            }
        }
        Ok(out)
    }
}

impl Predictor for Model {
    fn predict(&self, prompts: &[PromptBatch]) -> Result<Vec<Vec<f64>>> {
        self.unmasked().predict(prompts)
    }
}

/// Predictions and squared errors at every x position of one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPredictions {
    pub predictions: Vec<f64>,
    pub sq_errors: Vec<f64>,
    /// False for the leading positions that cannot identify the target.
    pub scored: Vec<bool>,
}

impl QueryPredictions {
    /// Mean squared error over scored positions; `None` if nothing is scored.
    pub fn scored_mse(&self) -> Option<f64> {
        let (s, n) = self
            .sq_errors
            .iter()
            .zip(&self.scored)
            .filter(|(_, &k)| k)
            .fold((0.0, 0usize), |(s, n), (e, _)| (s + e, n + 1));
        (n > 0).then(|| s / n as f64)
    }
}

/// Scores a predictor on prompts. For a degree-`n` target the first `n + 1`
/// positions are flagged as unscored.
pub fn predict_queries(
    predictor: &(impl Predictor + ?Sized),
    prompts: &[PromptBatch],
) -> Result<Vec<QueryPredictions>> {
    let preds = predictor.predict(prompts)?;
    prompts
        .iter()
        .zip(preds)
        .map(|(p, predictions)| {
            if predictions.len() != p.n_points() {
                return Err(invalid(
                    "predictor output",
                    format!("{} predictions for {} points", predictions.len(), p.n_points()),
                ));
            }
            let skip = p.function.family.scoring_degree() + 1;
            let sq_errors = predictions
                .iter()
                .zip(&p.ys)
                .map(|(a, y)| (a - y) * (a - y))
                .collect();
            let scored = (0..p.n_points()).map(|i| i >= skip).collect();
            Ok(QueryPredictions {
                predictions,
                sq_errors,
                scored,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{Distribution, FunctionSpec, TaskSpec};

    fn small() -> Model {
        Model::init(
            ModelConfig {
                n_layers: 3,
                n_heads: 2,
                d_model: 8,
                max_positions: 21,
                layernorm_eps: 1e-5,
            },
            11,
        )
        .unwrap()
    }

    fn prompt(k: usize, seed: u64) -> PromptBatch {
        TaskSpec::linear(1.0)
            .unwrap()
            .sample_prompts(1, k, seed)
            .unwrap()
            .remove(0)
    }

    #[test]
    fn sequence_lengths() {
        let m = small();
        assert_eq!(encode_prompt(&m, &prompt(0, 1).tokens()).unwrap().rows(), 1);
        assert_eq!(encode_prompt(&m, &prompt(2, 1).tokens()).unwrap().rows(), 5);
        assert!(encode_prompt(&m, &prompt(11, 1).tokens()).is_err());
    }

    #[test]
    fn trace_shapes() {
        let m = small();
        let t = forward(&m, &InterventionSpec::none(), &prompt(4, 2).tokens()).unwrap();
        assert_eq!(t.hidden.len(), 4);
        assert_eq!(t.seq_len(), 9);
        assert_eq!(t.predictions.len(), 5);
    }

    #[test]
    fn drop_is_passthrough() {
        let m = small();
        let t = forward(&m, &InterventionSpec::drop_layers([1]), &prompt(3, 2).tokens()).unwrap();
        assert_eq!(t.hidden[1], t.hidden[2]);
    }

    #[test]
    fn alpha_out_of_range_rejected() {
        let m = small();
        let spec = InterventionSpec::none().with_alpha(0, 1.5);
        assert!(forward(&m, &spec, &prompt(1, 0).tokens()).is_err());
        let spec = InterventionSpec::drop_layers([3]);
        assert!(spec.validate(&m.config).is_err());
    }

    #[test]
    fn batched_matches_single() {
        let m = small();
        let prompts: Vec<_> = (0..5).map(|s| prompt(3 + (s as usize % 2), s)).collect();
        let batched = m.predict(&prompts).unwrap();
        for (p, b) in prompts.iter().zip(&batched) {
            let single = forward(&m, &InterventionSpec::none(), &p.tokens()).unwrap();
            for (x, y) in single.predictions.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_readout_errors_are_squared_targets() {
        let mut m = small();
        m.params.dec_weight = Tensor::zeros(&[8, 1]);
        let f = FunctionSpec::linear(1.5, -0.5);
        let p = PromptBatch::from_inputs(f, vec![0.2, -0.4, 0.9]).unwrap();
        let q = predict_queries(&m, std::slice::from_ref(&p)).unwrap().remove(0);
        assert!(q.predictions.iter().all(|&v| v == 0.0));
        for (e, y) in q.sq_errors.iter().zip(&p.ys) {
            assert_eq!(*e, y * y);
        }
        assert_eq!(q.scored, vec![false, false, true]);
    }

    struct Oracle;
    impl Predictor for Oracle {
        fn predict(&self, prompts: &[PromptBatch]) -> Result<Vec<Vec<f64>>> {
            Ok(prompts
                .iter()
                .map(|p| p.xs.iter().map(|&x| p.function.eval(x)).collect())
                .collect())
        }
    }

    #[test]
    fn oracle_has_zero_error() {
        let task = TaskSpec {
            inputs: Distribution::symmetric(2.0).unwrap(),
            ..TaskSpec::linear(1.0).unwrap()
        };
        let prompts = task.sample_prompts(4, 6, 0).unwrap();
        for q in predict_queries(&Oracle, &prompts).unwrap() {
            assert!(q.sq_errors.iter().all(|&e| e == 0.0));
        }
    }
}
