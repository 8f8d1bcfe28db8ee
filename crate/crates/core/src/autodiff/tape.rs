//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its output value and enough saved state to run its
//! backward rule. Nodes are only ever appended, so the node order is a topological order and
//! [`Tape::backward`] replays the rules in reverse.

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{gelu, gelu_grad, gemm, split_axis};
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::profile::flops::{flops_of, ElementwiseKind, FlopCount, OpDescriptor};

pub const LAYER_NORM_EPS: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, inputs: usize, outputs: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: Var, b: Var },
    AddBroadcast { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Gelu { a: Var },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, outer: usize, len: usize, inner: usize, mean: Vec<f64>, rstd: Vec<f64> },
    Affine { x: Var, alpha: Var, beta: Var, channels: usize },
    Permute { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    Narrow { a: Var, outer: usize, len: usize, inner: usize, start: usize, width: usize },
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize, total: usize },
    Repeat { a: Var, outer: usize, inner: usize, times: usize },
    Mean { a: Var, outer: usize, len: usize, inner: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    Dropout { a: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, probs: Vec<f64>, labels: Vec<usize>, classes: usize },
    L1 { pred: Var, target: Var },
    Sum { a: Var },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<(u64, ParamId), Var>,
    param_nodes: Vec<(u64, ParamId, Var)>,
    flop_log: Vec<OpDescriptor>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Operations recorded so far, in execution order.
    pub fn flop_log(&self) -> &[OpDescriptor] {
        &self.flop_log
    }

    pub fn flops(&self) -> FlopCount {
        self.flop_log.iter().map(flops_of).sum()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn log(&mut self, op: OpDescriptor) {
        self.flop_log.push(op);
    }

    fn log_elementwise(&mut self, kind: ElementwiseKind, elements: usize) {
        self.log(OpDescriptor::Elementwise { kind, elements });
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.values().to_vec(), t.shape().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        let (shape, values) = (t.shape().to_vec(), t.into_values());
        Ok(self.push(values, shape, Op::Leaf, false))
    }

    /// Leaf that receives a gradient regardless of any parameter store.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.values().to_vec(), t.shape().to_vec(), Op::Leaf, true)
    }

    /// Inserts a parameter once per tape; frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.tag(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.values().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad());
        self.params.insert(key, v);
        self.param_nodes.push((key.0, id, v));
        v
    }

    /// Adds the gradient of every parameter of `store` seen on this tape into its accumulator.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for &(tag, id, v) in &self.param_nodes {
            if tag != store.tag() {
                continue;
            }
            if let Some(g) = grads.get(v) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        self.log(OpDescriptor::MatMul { m, k, n });
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, m, k, n }, ng))
    }

    /// `x · w + b` over the last axis of `x`; `w` is `inputs × outputs`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let inputs = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[0] != inputs {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let outputs = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [outputs] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: sw,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let rows = sx.iter().product::<usize>() / inputs;
        let mut out = match b {
            Some(b) => {
                let bias = self.value(b);
                let mut out = Vec::with_capacity(rows * outputs);
                for _ in 0..rows {
                    out.extend_from_slice(bias);
                }
                out
            }
            None => vec![0.0; rows * outputs],
        };
        gemm(rows, inputs, outputs, self.value(x), false, self.value(w), false, &mut out, true);
        self.log(OpDescriptor::Linear {
            rows,
            inputs,
            outputs,
            bias: b.is_some(),
        });
        let mut shape = sx;
        *shape.last_mut().unwrap() = outputs;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(
            out,
            shape,
            Op::Linear {
                x,
                w,
                b,
                rows,
                inputs,
                outputs,
            },
            ng,
        ))
    }

    /// Batched product of `[batch, m, k]` with `[batch, k, n]` (or `[batch, n, k]` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::ShapeMismatch {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &va[i * m * k..(i + 1) * m * k],
                    false,
                    &vb[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        for _ in 0..batch {
            self.log(OpDescriptor::MatMul { m, k, n });
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            out,
            vec![batch, m, n],
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            ng,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.log_elementwise(ElementwiseKind::Merge, out.len());
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Add { a, b }, ng))
    }

    /// `a + b` where the shape of `b` is a suffix of the shape of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::ShapeMismatch {
                op: "add_broadcast",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let vb = self.value(b);
        let period = vb.len();
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + vb[i % period])
            .collect();
        self.log_elementwise(ElementwiseKind::Merge, out.len());
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::AddBroadcast { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.log_elementwise(ElementwiseKind::Mul, out.len());
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        self.log_elementwise(ElementwiseKind::Scale, out.len());
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Scale { a, c }, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| gelu(x)).collect();
        self.log_elementwise(ElementwiseKind::Gelu, out.len());
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Gelu { a }, ng)
    }

    fn check_axis(&self, v: Var, axis: usize) -> Result<()> {
        let rank = self.shape(v).len();
        if axis >= rank {
            return Err(Error::AxisOutOfRange { axis, rank });
        }
        Ok(())
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let (outer, len, inner) = split_axis(self.shape(a), axis);
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        self.log_elementwise(ElementwiseKind::Softmax, out.len());
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Softmax { a, outer, len, inner }, ng))
    }

    /// Normalises to zero mean and unit variance along `axis`, then scales by `gamma` and shifts
    /// by `beta` (both of the axis extent).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let (outer, len, inner) = split_axis(self.shape(x), axis);
        for p in [gamma, beta] {
            if self.shape(p) != [len] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = vec![0.0; xv.len()];
        let mut means = Vec::with_capacity(outer * inner);
        let mut rstds = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mean = (0..len).map(|j| xv[idx(j)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|j| (xv[idx(j)] - mean).powi(2)).sum::<f64>() / len as f64;
                let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for j in 0..len {
                    out[idx(j)] = (xv[idx(j)] - mean) * rstd * g[j] + b[j];
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        self.log_elementwise(ElementwiseKind::LayerNorm, out.len());
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                outer,
                len,
                inner,
                mean: means,
                rstd: rstds,
            },
            ng,
        ))
    }

    /// Per-channel `x·α + β` over the last axis; no statistics are computed.
    pub fn affine(&mut self, x: Var, alpha: Var, beta: Var) -> Result<Var> {
        let channels = *self.shape(x).last().unwrap_or(&0);
        for p in [alpha, beta] {
            if self.shape(p) != [channels] {
                return Err(Error::ShapeMismatch {
                    op: "affine",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (xv, a, b) = (self.value(x), self.value(alpha), self.value(beta));
        let out: Vec<f64> = xv
            .iter()
            .enumerate()
            .map(|(i, v)| v * a[i % channels] + b[i % channels])
            .collect();
        self.log_elementwise(ElementwiseKind::AffineNorm, out.len());
        let ng = self.ng(x) || self.ng(alpha) || self.ng(beta);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            out,
            shape,
            Op::Affine {
                x,
                alpha,
                beta,
                channels,
            },
            ng,
        ))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::ShapeMismatch {
                op: "permute",
                lhs: shape,
                rhs: perm.to_vec(),
            });
        }
        let (out, out_shape) = permute_values(self.value(a), &shape, perm);
        self.log_elementwise(ElementwiseKind::Movement, out.len());
        let ng = self.ng(a);
        Ok(self.push(out, out_shape, Op::Permute { a, perm: perm.to_vec() }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        if shape.iter().product::<usize>() != n || shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                values: n,
            });
        }
        let out = self.value(a).to_vec();
        self.log_elementwise(ElementwiseKind::Movement, n);
        let ng = self.ng(a);
        Ok(self.push(out, shape.to_vec(), Op::Reshape { a }, ng))
    }

    /// Slice `start..start + width` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, width: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        if width == 0 || start + width > len {
            return Err(Error::ShapeMismatch {
                op: "narrow",
                lhs: shape,
                rhs: vec![start, width],
            });
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&x[base..base + width * inner]);
        }
        self.log_elementwise(ElementwiseKind::Movement, out.len());
        let mut out_shape = shape;
        out_shape[axis] = width;
        let ng = self.ng(a);
        Ok(self.push(
            out,
            out_shape,
            Op::Narrow {
                a,
                outer,
                len,
                inner,
                start,
                width,
            },
            ng,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(Error::InvalidShape {
            shape: vec![],
            values: 0,
        })?;
        self.check_axis(first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            extents.push((p, s[axis]));
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, len) in &extents {
                let v = self.value(p);
                out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        self.log_elementwise(ElementwiseKind::Movement, out.len());
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            out,
            shape,
            Op::Concat {
                parts: extents,
                outer,
                inner,
                total,
            },
            ng,
        ))
    }

    /// Repeats a unit-extent `axis` `times` times.
    pub fn repeat(&mut self, a: Var, axis: usize, times: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        if shape[axis] != 1 || times == 0 {
            return Err(Error::ShapeMismatch {
                op: "repeat",
                lhs: shape,
                rhs: vec![axis, times],
            });
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let x = self.value(a);
        let mut out = Vec::with_capacity(outer * times * inner);
        for o in 0..outer {
            for _ in 0..times {
                out.extend_from_slice(&x[o * inner..(o + 1) * inner]);
            }
        }
        self.log_elementwise(ElementwiseKind::Movement, out.len());
        let mut out_shape = shape;
        out_shape[axis] = times;
        let ng = self.ng(a);
        Ok(self.push(out, out_shape, Op::Repeat { a, outer, inner, times }, ng))
    }

    /// Mean along `axis`, removing it.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        self.log(OpDescriptor::Mean {
            inputs: x.len(),
            outputs: out.len(),
        });
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let ng = self.ng(a);
        Ok(self.push(out, out_shape, Op::Mean { a, outer, len, inner }, ng))
    }

    /// Cross-correlation of `x: [batch, H, W, C_in]` with `w: [k, k, C_in, C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sw[1] || sw[2] != sx[3] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (batch, height, width, in_channels) = (sx[0], sx[1], sx[2], sx[3]);
        let (kernel, out_channels) = (sw[0], sw[3]);
        if let Some(b) = b {
            if self.shape(b) != [out_channels] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: sw,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let (ph, pw) = (height + 2 * padding, width + 2 * padding);
        if kernel > ph || kernel > pw {
            return Err(Error::KernelTooLarge {
                kernel: (kernel, kernel),
                input: (ph, pw),
            });
        }
        let geom = ConvGeom {
            batch,
            height,
            width,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            out_height: (ph - kernel) / stride + 1,
            out_width: (pw - kernel) / stride + 1,
        };
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        self.log(OpDescriptor::Conv2d {
            kernel: (kernel, kernel),
            in_channels,
            out_channels,
            out_hw: (geom.out_height, geom.out_width),
            batch,
            bias: b.is_some(),
        });
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(
            out,
            vec![batch, geom.out_height, geom.out_width, out_channels],
            Op::Conv2d { x, w, b, geom },
            ng,
        ))
    }

    /// Windowed maximum over `x: [batch, H, W, C]`. Ties resolve to the first window element
    /// in row-major order, which is also where the gradient is routed.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "maxpool2d",
                lhs: sx,
                rhs: vec![window, stride],
            });
        }
        let (batch, height, width, channels) = (sx[0], sx[1], sx[2], sx[3]);
        if window == 0 || window > height || window > width {
            return Err(Error::WindowTooLarge {
                window,
                input: (height, width),
            });
        }
        let (oh, ow) = ((height - window) / stride + 1, (width - window) / stride + 1);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(batch * oh * ow * channels);
        let mut argmax = Vec::with_capacity(out.capacity());
        for bi in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    for c in 0..channels {
                        let mut best = usize::MAX;
                        let mut best_val = f64::NEG_INFINITY;
                        for ky in 0..window {
                            for kx in 0..window {
                                let idx = ((bi * height + oy * stride + ky) * width + ox * stride + kx) * channels + c;
                                if best == usize::MAX || xv[idx] > best_val {
                                    best = idx;
                                    best_val = xv[idx];
                                }
                            }
                        }
                        out.push(best_val);
                        argmax.push(best);
                    }
                }
            }
        }
        self.log(OpDescriptor::MaxPool {
            window,
            outputs: out.len(),
        });
        let ng = self.ng(x);
        Ok(self.push(out, vec![batch, oh, ow, channels], Op::MaxPool { x, argmax }, ng))
    }

    /// Inverted dropout. `rng: None` means inference mode, where this is the identity and
    /// records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidRate(rate));
        }
        let Some(rng) = rng else { return Ok(a) };
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        self.log_elementwise(ElementwiseKind::Dropout, n);
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Dropout { a, mask }, ng))
    }

    /// Mean negative log-softmax probability of the true class, `logits: [batch, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let x = self.value(logits);
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            loss += log_z - row[label];
            for (p, v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        self.log_elementwise(ElementwiseKind::CrossEntropy, x.len());
        let ng = self.ng(logits);
        Ok(self.push(
            vec![loss / batch as f64],
            vec![1],
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
                classes,
            },
            ng,
        ))
    }

    /// Mean absolute error. The subgradient at `pred == target` is 0.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::ShapeMismatch {
                op: "l1_loss",
                lhs: self.shape(pred).to_vec(),
                rhs: self.shape(target).to_vec(),
            });
        }
        let (p, t) = (self.value(pred), self.value(target));
        let loss = p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
        self.log_elementwise(ElementwiseKind::AbsError, p.len());
        let ng = self.ng(pred) || self.ng(target);
        Ok(self.push(vec![loss], vec![1], Op::L1 { pred, target }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(vec![s], vec![1], Op::Sum { a }, ng)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidShape {
                shape: self.shape(loss).to_vec(),
                values: 1,
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { by_node: grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = self.acc(grads, a) {
                    gemm(m, n, k, g, false, self.value(b), true, ga, true);
                }
                if let Some(gb) = self.acc(grads, b) {
                    gemm(k, m, n, self.value(a), true, g, false, gb, true);
                }
            }
            &Op::Linear {
                x,
                w,
                b,
                rows,
                inputs,
                outputs,
            } => {
                if let Some(gx) = self.acc(grads, x) {
                    gemm(rows, outputs, inputs, g, false, self.value(w), true, gx, true);
                }
                if let Some(gw) = self.acc(grads, w) {
                    gemm(inputs, rows, outputs, self.value(x), true, g, false, gw, true);
                }
                if let Some(gb) = b.and_then(|b| self.acc(grads, b)) {
                    for r in 0..rows {
                        for (acc, v) in gb.iter_mut().zip(&g[r * outputs..(r + 1) * outputs]) {
                            *acc += v;
                        }
                    }
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (va, vb) = (self.value(a), self.value(b));
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &vb[i * k * n..(i + 1) * k * n];
                        // C = A·B  => dA = dC·Bᵀ ;  C = A·Bᵀ => dA = dC·B
                        gemm(m, n, k, gi, false, bi, !trans_b, &mut ga[i * m * k..(i + 1) * m * k], true);
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &va[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            // dB (n×k) = dCᵀ·A
                            gemm(n, m, k, gi, true, ai, false, out, true);
                        } else {
                            // dB (k×n) = Aᵀ·dC
                            gemm(k, m, n, ai, true, gi, false, out, true);
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            &Op::AddBroadcast { a, b } => {
                if let Some(ga) = self.acc(grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, b) {
                    let period = gb.len();
                    for (i, v) in g.iter().enumerate() {
                        gb[i % period] += v;
                    }
                }
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (self.value(a), self.value(b));
                if let Some(ga) = self.acc(grads, a) {
                    for ((acc, gi), y) in ga.iter_mut().zip(g).zip(vb) {
                        *acc += gi * y;
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for ((acc, gi), x) in gb.iter_mut().zip(g).zip(va) {
                        *acc += gi * x;
                    }
                }
            }
            &Op::Scale { a, c } => {
                if let Some(ga) = self.acc(grads, a) {
                    for (acc, gi) in ga.iter_mut().zip(g) {
                        *acc += gi * c;
                    }
                }
            }
            &Op::Gelu { a } => {
                let x = self.value(a);
                if let Some(ga) = self.acc(grads, a) {
                    for ((acc, gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        *acc += gi * gelu_grad(xi);
                    }
                }
            }
            &Op::Softmax { a, outer, len, inner } => {
                let y = &node.value;
                if let Some(ga) = self.acc(grads, a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                ga[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                outer,
                len,
                inner,
                mean,
                rstd,
            } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let xhat = |o: usize, i: usize, j: usize| {
                    let r = o * inner + i;
                    (xv[(o * len + j) * inner + i] - mean[r]) * rstd[r]
                };
                if let Some(gg) = self.acc(grads, *gamma) {
                    for o in 0..outer {
                        for i in 0..inner {
                            for (j, acc) in gg.iter_mut().enumerate() {
                                *acc += g[(o * len + j) * inner + i] * xhat(o, i, j);
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for o in 0..outer {
                        for i in 0..inner {
                            for (j, acc) in gb.iter_mut().enumerate() {
                                *acc += g[(o * len + j) * inner + i];
                            }
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let n = len as f64;
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for j in 0..len {
                                let d = g[idx(j)] * gv[j];
                                sum_d += d;
                                sum_dx += d * xhat(o, i, j);
                            }
                            let r = rstd[o * inner + i];
                            for j in 0..len {
                                let d = g[idx(j)] * gv[j];
                                gx[idx(j)] += r * (d - sum_d / n - xhat(o, i, j) * sum_dx / n);
                            }
                        }
                    }
                }
            }
            &Op::Affine {
                x,
                alpha,
                beta,
                channels,
            } => {
                let (xv, av) = (self.value(x), self.value(alpha));
                if let Some(gx) = self.acc(grads, x) {
                    for (i, (acc, gi)) in gx.iter_mut().zip(g).enumerate() {
                        *acc += gi * av[i % channels];
                    }
                }
                if let Some(ga) = self.acc(grads, alpha) {
                    for (i, (gi, xi)) in g.iter().zip(xv).enumerate() {
                        ga[i % channels] += gi * xi;
                    }
                }
                if let Some(gb) = self.acc(grads, beta) {
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % channels] += gi;
                    }
                }
            }
            Op::Permute { a, perm } => {
                if let Some(ga) = self.acc(grads, *a) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let (back, _) = permute_values(g, &node.shape, &inverse);
                    add_into(ga, &back);
                }
            }
            &Op::Reshape { a } => {
                if let Some(ga) = self.acc(grads, a) {
                    add_into(ga, g);
                }
            }
            &Op::Narrow {
                a,
                outer,
                len,
                inner,
                start,
                width,
            } => {
                if let Some(ga) = self.acc(grads, a) {
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        add_into(&mut ga[dst..dst + width * inner], &g[o * width * inner..(o + 1) * width * inner]);
                    }
                }
            }
            Op::Concat {
                parts,
                outer,
                inner,
                total,
            } => {
                let (outer, inner, total) = (*outer, *inner, *total);
                let mut offset = 0;
                for &(p, len) in parts {
                    if let Some(gp) = self.acc(grads, p) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            add_into(&mut gp[o * len * inner..(o + 1) * len * inner], &g[src..src + len * inner]);
                        }
                    }
                    offset += len;
                }
            }
            &Op::Repeat { a, outer, inner, times } => {
                if let Some(ga) = self.acc(grads, a) {
                    for o in 0..outer {
                        for t in 0..times {
                            let src = (o * times + t) * inner;
                            add_into(&mut ga[o * inner..(o + 1) * inner], &g[src..src + inner]);
                        }
                    }
                }
            }
            &Op::Mean { a, outer, len, inner } => {
                if let Some(ga) = self.acc(grads, a) {
                    let inv = 1.0 / len as f64;
                    for o in 0..outer {
                        for j in 0..len {
                            let dst = &mut ga[(o * len + j) * inner..(o * len + j + 1) * inner];
                            for (acc, gi) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *acc += gi * inv;
                            }
                        }
                    }
                }
            }
            &Op::Conv2d { x, w, b, ref geom } => {
                if let Some(gb) = b.and_then(|b| self.acc(grads, b)) {
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % geom.out_channels] += gi;
                    }
                }
                if let Some(gw) = self.acc(grads, w) {
                    conv2d_grad_weight(self.value(x), g, gw, geom);
                }
                if let Some(gx) = self.acc(grads, x) {
                    conv2d_grad_input(self.value(w), g, gx, geom);
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (&src, gi) in argmax.iter().zip(g) {
                        gx[src] += gi;
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((acc, gi), m) in ga.iter_mut().zip(g).zip(mask) {
                        *acc += gi * m;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                classes,
            } => {
                if let Some(gl) = self.acc(grads, *logits) {
                    let scale = g[0] / labels.len() as f64;
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..*classes {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            gl[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
            &Op::L1 { pred, target } => {
                let (p, t) = (self.value(pred), self.value(target));
                let scale = g[0] / p.len() as f64;
                let sign = |d: f64| {
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                if let Some(gp) = self.acc(grads, pred) {
                    for ((acc, a), b) in gp.iter_mut().zip(p).zip(t) {
                        *acc += scale * sign(a - b);
                    }
                }
                if let Some(gt) = self.acc(grads, target) {
                    for ((acc, a), b) in gt.iter_mut().zip(p).zip(t) {
                        *acc -= scale * sign(a - b);
                    }
                }
            }
            &Op::Sum { a } => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().for_each(|v| *v += g[0]);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Returns `x` (of `shape`) with its axes reordered so that output axis `i` is input axis `perm[i]`.
fn permute_values(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..x.len() {
        out.push(x[src]);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            src += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    (out, out_shape)
}

fn conv_in_index(geom: &ConvGeom, out_pos: usize, k: usize, extent: usize) -> Option<usize> {
    let pos = (out_pos * geom.stride + k) as isize - geom.padding as isize;
    (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
}

fn conv2d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, geom: &ConvGeom) -> Vec<f64> {
    let (ci, co, k) = (geom.in_channels, geom.out_channels, geom.kernel);
    let mut out = vec![0.0; geom.batch * geom.out_height * geom.out_width * co];
    for bi in 0..geom.batch {
        for oy in 0..geom.out_height {
            for ox in 0..geom.out_width {
                let o_base = ((bi * geom.out_height + oy) * geom.out_width + ox) * co;
                let acc = &mut out[o_base..o_base + co];
                if let Some(b) = b {
                    acc.copy_from_slice(b);
                }
                for ky in 0..k {
                    let Some(iy) = conv_in_index(geom, oy, ky, geom.height) else { continue };
                    for kx in 0..k {
                        let Some(ix) = conv_in_index(geom, ox, kx, geom.width) else { continue };
                        let x_base = ((bi * geom.height + iy) * geom.width + ix) * ci;
                        let w_base = (ky * k + kx) * ci * co;
                        for c in 0..ci {
                            let xv = x[x_base + c];
                            let wrow = &w[w_base + c * co..w_base + (c + 1) * co];
                            for (a, wv) in acc.iter_mut().zip(wrow) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_grad_weight(x: &[f64], g: &[f64], gw: &mut [f64], geom: &ConvGeom) {
    let (ci, co, k) = (geom.in_channels, geom.out_channels, geom.kernel);
    for bi in 0..geom.batch {
        for oy in 0..geom.out_height {
            for ox in 0..geom.out_width {
                let o_base = ((bi * geom.out_height + oy) * geom.out_width + ox) * co;
                let go = &g[o_base..o_base + co];
                for ky in 0..k {
                    let Some(iy) = conv_in_index(geom, oy, ky, geom.height) else { continue };
                    for kx in 0..k {
                        let Some(ix) = conv_in_index(geom, ox, kx, geom.width) else { continue };
                        let x_base = ((bi * geom.height + iy) * geom.width + ix) * ci;
                        let w_base = (ky * k + kx) * ci * co;
                        for c in 0..ci {
                            let xv = x[x_base + c];
                            let wrow = &mut gw[w_base + c * co..w_base + (c + 1) * co];
                            for (a, gv) in wrow.iter_mut().zip(go) {
                                *a += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_grad_input(w: &[f64], g: &[f64], gx: &mut [f64], geom: &ConvGeom) {
    let (ci, co, k) = (geom.in_channels, geom.out_channels, geom.kernel);
    for bi in 0..geom.batch {
        for oy in 0..geom.out_height {
            for ox in 0..geom.out_width {
                let o_base = ((bi * geom.out_height + oy) * geom.out_width + ox) * co;
                let go = &g[o_base..o_base + co];
                for ky in 0..k {
                    let Some(iy) = conv_in_index(geom, oy, ky, geom.height) else { continue };
                    for kx in 0..k {
                        let Some(ix) = conv_in_index(geom, ox, kx, geom.width) else { continue };
                        let x_base = ((bi * geom.height + iy) * geom.width + ix) * ci;
                        let w_base = (ky * k + kx) * ci * co;
                        for c in 0..ci {
                            let wrow = &w[w_base + c * co..w_base + (c + 1) * co];
                            gx[x_base + c] += wrow.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
    }
}
