// SPDX-License-Identifier: MIT OR Apache-2.0

//! Computation backends: eager evaluation and a reverse-mode tape.
//!
//! Model code is written once against [`Graph`]. [`Eager`] computes values
//! and keeps nothing else, which is what evaluation passes use. [`Tape`]
//! records every operation so [`Tape::backward`] can produce gradients for
//! its leaves. A tape lives for a single forward pass and is consumed by
//! `backward`.

use crate::error::{KernelError, Result};
use crate::ops::{self, AttentionShape, Broadcast, LayerNormCache};
use crate::tensor::Tensor;

/// The differentiable operation set used by the transformer.
pub trait Graph {
    type Node: Clone;

    fn value<'a>(&'a self, node: &'a Self::Node) -> &'a Tensor;

    /// Inserts a value that never receives a gradient.
    fn constant(&mut self, value: Tensor) -> Self::Node;

    fn matmul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;

    /// Elementwise sum; `b` may also be a row vector broadcast over `a`'s rows.
    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;

    fn scale(&mut self, a: &Self::Node, factor: f64) -> Result<Self::Node>;

    fn softmax_rows(&mut self, a: &Self::Node) -> Result<Self::Node>;

    fn layernorm(
        &mut self,
        x: &Self::Node,
        gain: &Self::Node,
        bias: &Self::Node,
        eps: f64,
    ) -> Result<Self::Node>;

    fn gelu(&mut self, x: &Self::Node) -> Result<Self::Node>;

    fn embed_scalar(
        &mut self,
        values: &[f64],
        weight: &Self::Node,
        bias: &Self::Node,
    ) -> Result<Self::Node>;

    fn add_positional(
        &mut self,
        x: &Self::Node,
        positions: &Self::Node,
        seq_len: usize,
    ) -> Result<Self::Node>;

    fn causal_attention(
        &mut self,
        q: &Self::Node,
        k: &Self::Node,
        v: &Self::Node,
        shape: AttentionShape,
    ) -> Result<Self::Node>;

    fn readout(
        &mut self,
        h: &Self::Node,
        weight: &Self::Node,
        bias: &Self::Node,
        rows: &[usize],
    ) -> Result<Self::Node>;

    fn mse(&mut self, pred: &Self::Node, target: &[f64]) -> Result<Self::Node>;
}

fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(KernelError::NonFinite { op })
    }
}

/// Gradient-free evaluation; nodes are plain tensors.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Graph for Eager {
    type Node = Tensor;

    fn value<'a>(&'a self, node: &'a Tensor) -> &'a Tensor {
        node
    }

    fn constant(&mut self, value: Tensor) -> Tensor {
        value
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        finite("matmul", ops::matmul(a, b)?)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        finite("add", ops::add(a, b)?)
    }

    fn scale(&mut self, a: &Tensor, factor: f64) -> Result<Tensor> {
        finite("scale", a.scaled(factor))
    }

    fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        finite("softmax_rows", ops::softmax_rows(a)?)
    }

    fn layernorm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        finite("layernorm", ops::layernorm(x, gain, bias, eps)?.0)
    }

    fn gelu(&mut self, x: &Tensor) -> Result<Tensor> {
        finite("gelu", ops::gelu(x))
    }

    fn embed_scalar(&mut self, values: &[f64], weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        finite("embed_scalar", ops::embed_scalar(values, weight, bias)?)
    }

    fn add_positional(&mut self, x: &Tensor, positions: &Tensor, seq_len: usize) -> Result<Tensor> {
        finite("add_positional", ops::add_positional(x, positions, seq_len)?)
    }

    fn causal_attention(
        &mut self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        shape: AttentionShape,
    ) -> Result<Tensor> {
        finite("causal_attention", ops::causal_attention(q, k, v, shape)?.0)
    }

    fn readout(&mut self, h: &Tensor, weight: &Tensor, bias: &Tensor, rows: &[usize]) -> Result<Tensor> {
        finite("readout", ops::readout(h, weight, bias, rows)?)
    }

    fn mse(&mut self, pred: &Tensor, target: &[f64]) -> Result<Tensor> {
        finite("mse", ops::mse(pred, target)?)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: LayerNormCache,
    },
    Gelu(Var),
    EmbedScalar {
        values: Vec<f64>,
        weight: Var,
        bias: Var,
    },
    AddPositional {
        x: Var,
        positions: Var,
        seq_len: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Vec<f64>,
    },
    Readout {
        h: Var,
        weight: Var,
        bias: Var,
        rows: Vec<usize>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records one forward pass for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn record(&mut self, opname: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        let value = finite(opname, value)?;
        let needs = self.needs(parents);
        Ok(self.push(value, op, needs))
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Runs reverse-mode accumulation from a scalar `loss`, consuming the tape.
    ///
    /// Leaves that the loss does not depend on get an all-zero gradient.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(KernelError::NotScalar {
                op: "backward",
                shape: loss_node.value.shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let mut leaves = Vec::new();
        for (i, node) in self.nodes.into_iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                let shape = node.value.shape().to_vec();
                let data = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                leaves.push((Var(i), Tensor::from_parts(shape, data)));
            }
        }
        Ok(Gradients { leaves })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if self.wants(*a) {
                    with_grad(grads, *a, m * k, |da| {
                        ops::gemm(m, n, k, 1.0, g, false, bv.data(), true, 1.0, da)
                    });
                }
                if self.wants(*b) {
                    with_grad(grads, *b, k * n, |db| {
                        ops::gemm(k, m, n, 1.0, av.data(), true, g, false, 1.0, db)
                    });
                }
            }
            Op::Add(a, b, kind) => {
                if self.wants(*a) {
                    with_grad(grads, *a, g.len(), |da| axpy(da, g, 1.0));
                }
                if self.wants(*b) {
                    let blen = self.val(*b).len();
                    with_grad(grads, *b, blen, |db| match kind {
                        Broadcast::Same => axpy(db, g, 1.0),
                        Broadcast::Row => ops::accumulate_column_sums(g, blen, db),
                    });
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    with_grad(grads, *a, g.len(), |da| axpy(da, g, *s));
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let cols = node.value.cols();
                    with_grad(grads, *a, g.len(), |da| {
                        ops::softmax_rows_backward(node.value.data(), g, cols, da)
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            } => {
                let cols = node.value.cols();
                let gv = self.val(*gain).data();
                if self.wants(*x) {
                    with_grad(grads, *x, g.len(), |dx| {
                        ops::layernorm_backward(cache, gv, g, cols, Some(dx), None, None)
                    });
                }
                if self.wants(*gain) {
                    with_grad(grads, *gain, cols, |dg| {
                        ops::layernorm_backward(cache, gv, g, cols, None, Some(dg), None)
                    });
                }
                if self.wants(*bias) {
                    with_grad(grads, *bias, cols, |db| {
                        ops::layernorm_backward(cache, gv, g, cols, None, None, Some(db))
                    });
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let x = self.val(*a).data();
                    with_grad(grads, *a, g.len(), |da| {
                        for ((d, &xv), &gv) in da.iter_mut().zip(x).zip(g) {
                            *d += gv * ops::gelu_derivative(xv);
                        }
                    });
                }
            }
            Op::EmbedScalar {
                values,
                weight,
                bias,
            } => {
                let d = self.val(*weight).len();
                if self.wants(*weight) {
                    with_grad(grads, *weight, d, |dw| {
                        for (row, &s) in g.chunks(d).zip(values) {
                            axpy(dw, row, s);
                        }
                    });
                }
                if self.wants(*bias) {
                    with_grad(grads, *bias, d, |db| ops::accumulate_column_sums(g, d, db));
                }
            }
            Op::AddPositional {
                x,
                positions,
                seq_len,
            } => {
                if self.wants(*x) {
                    with_grad(grads, *x, g.len(), |dx| axpy(dx, g, 1.0));
                }
                if self.wants(*positions) {
                    let pv = self.val(*positions);
                    let d = pv.cols();
                    with_grad(grads, *positions, pv.len(), |dp| {
                        for (r, row) in g.chunks(d).enumerate() {
                            let p = r % seq_len;
                            axpy(&mut dp[p * d..(p + 1) * d], row, 1.0);
                        }
                    });
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => {
                let d = node.value.cols();
                let len = node.value.len();
                let mut dq = vec![0.0; len];
                let mut dk = vec![0.0; len];
                let mut dv = vec![0.0; len];
                ops::causal_attention_backward(
                    self.val(*q).data(),
                    self.val(*k).data(),
                    self.val(*v).data(),
                    probs,
                    g,
                    d,
                    *shape,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                for (var, part) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.wants(var) {
                        with_grad(grads, var, len, |acc| axpy(acc, &part, 1.0));
                    }
                }
            }
            Op::Readout {
                h,
                weight,
                bias,
                rows,
            } => {
                let hv = self.val(*h);
                let d = hv.cols();
                if self.wants(*h) {
                    let w = self.val(*weight).data();
                    with_grad(grads, *h, hv.len(), |dh| {
                        for (&r, &gv) in rows.iter().zip(g) {
                            axpy(&mut dh[r * d..(r + 1) * d], w, gv);
                        }
                    });
                }
                if self.wants(*weight) {
                    with_grad(grads, *weight, d, |dw| {
                        for (&r, &gv) in rows.iter().zip(g) {
                            axpy(dw, &hv.data()[r * d..(r + 1) * d], gv);
                        }
                    });
                }
                if self.wants(*bias) {
                    with_grad(grads, *bias, 1, |db| db[0] += g.iter().sum::<f64>());
                }
            }
            Op::Mse { pred, target } => {
                if self.wants(*pred) {
                    let p = self.val(*pred).data();
                    let scale = 2.0 * g[0] / target.len() as f64;
                    with_grad(grads, *pred, p.len(), |dp| {
                        for ((d, pv), t) in dp.iter_mut().zip(p).zip(target) {
                            *d += scale * (pv - t);
                        }
                    });
                }
            }
        }
    }
}

fn with_grad(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let mut buf = grads[v.0].take().unwrap_or_else(|| vec![0.0; len]);
    f(&mut buf);
    grads[v.0] = Some(buf);
}

fn axpy(acc: &mut [f64], x: &[f64], a: f64) {
    for (o, v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

impl Graph for Tape {
    type Node = Var;

    fn value<'a>(&'a self, node: &'a Var) -> &'a Tensor {
        self.val(*node)
    }

    fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = ops::matmul(self.val(*a), self.val(*b))?;
        self.record("matmul", out, Op::MatMul(*a, *b), &[*a, *b])
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let kind = ops::add_broadcast_kind(self.val(*a), self.val(*b))?;
        let out = ops::add(self.val(*a), self.val(*b))?;
        self.record("add", out, Op::Add(*a, *b, kind), &[*a, *b])
    }

    fn scale(&mut self, a: &Var, factor: f64) -> Result<Var> {
        let out = self.val(*a).scaled(factor);
        self.record("scale", out, Op::Scale(*a, factor), &[*a])
    }

    fn softmax_rows(&mut self, a: &Var) -> Result<Var> {
        let out = ops::softmax_rows(self.val(*a))?;
        self.record("softmax_rows", out, Op::Softmax(*a), &[*a])
    }

    fn layernorm(&mut self, x: &Var, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let (out, cache) = ops::layernorm(self.val(*x), self.val(*gain), self.val(*bias), eps)?;
        let op = Op::LayerNorm {
            x: *x,
            gain: *gain,
            bias: *bias,
            cache,
        };
        self.record("layernorm", out, op, &[*x, *gain, *bias])
    }

    fn gelu(&mut self, x: &Var) -> Result<Var> {
        let out = ops::gelu(self.val(*x));
        self.record("gelu", out, Op::Gelu(*x), &[*x])
    }

    fn embed_scalar(&mut self, values: &[f64], weight: &Var, bias: &Var) -> Result<Var> {
        let out = ops::embed_scalar(values, self.val(*weight), self.val(*bias))?;
        let op = Op::EmbedScalar {
            values: values.to_vec(),
            weight: *weight,
            bias: *bias,
        };
        self.record("embed_scalar", out, op, &[*weight, *bias])
    }

    fn add_positional(&mut self, x: &Var, positions: &Var, seq_len: usize) -> Result<Var> {
        let out = ops::add_positional(self.val(*x), self.val(*positions), seq_len)?;
        let op = Op::AddPositional {
            x: *x,
            positions: *positions,
            seq_len,
        };
        self.record("add_positional", out, op, &[*x, *positions])
    }

    fn causal_attention(&mut self, q: &Var, k: &Var, v: &Var, shape: AttentionShape) -> Result<Var> {
        let (out, probs) = ops::causal_attention(self.val(*q), self.val(*k), self.val(*v), shape)?;
        let op = Op::Attention {
            q: *q,
            k: *k,
            v: *v,
            shape,
            probs,
        };
        self.record("causal_attention", out, op, &[*q, *k, *v])
    }

    fn readout(&mut self, h: &Var, weight: &Var, bias: &Var, rows: &[usize]) -> Result<Var> {
        let out = ops::readout(self.val(*h), self.val(*weight), self.val(*bias), rows)?;
        let op = Op::Readout {
            h: *h,
            weight: *weight,
            bias: *bias,
            rows: rows.to_vec(),
        };
        self.record("readout", out, op, &[*h, *weight, *bias])
    }

    fn mse(&mut self, pred: &Var, target: &[f64]) -> Result<Var> {
        let out = ops::mse(self.val(*pred), target)?;
        let op = Op::Mse {
            pred: *pred,
            target: target.to_vec(),
        };
        self.record("mse", out, op, &[*pred])
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<(Var, Tensor)>,
}

impl Gradients {
    /// Gradient for a leaf; `None` if `var` was not created with [`Tape::leaf`].
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves
            .binary_search_by_key(&var, |(v, _)| *v)
            .ok()
            .map(|i| &self.leaves[i].1)
    }

    /// Moves the gradient out, leaving an empty tensor behind.
    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        let i = self.leaves.binary_search_by_key(&var, |(v, _)| *v).ok()?;
        Some(std::mem::replace(&mut self.leaves[i].1, Tensor::zeros(&[0])))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}
