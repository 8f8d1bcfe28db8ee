use crate::autodiff::nn::{gelu_descriptor, merge_descriptor, Ctx, LayerNormParams, Linear};
use crate::autodiff::{ParamId, ParamStore, Rng, Var};
use crate::error::{Error, Result};
use crate::profile::flops::{ElementwiseKind, OpDescriptor};

/// Multi-head scaled dot-product self-attention over `[batch, tokens, d]`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::InvalidConfig(format!("head count {heads} must divide embed dim {dim}")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
            dim,
        })
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `[batch, tokens, d]` → `[batch·heads, tokens, d/heads]`.
    fn split_heads(&self, cx: &mut Ctx, x: Var, batch: usize, tokens: usize) -> Result<Var> {
        let x = cx.tape.reshape(x, &[batch, tokens, self.heads, self.head_dim()])?;
        let x = cx.tape.permute(x, &[0, 2, 1, 3])?;
        cx.tape.reshape(x, &[batch * self.heads, tokens, self.head_dim()])
    }

    /// Returns the projected output and the attention weights `[batch·heads, tokens, tokens]`.
    pub fn forward_with_weights(&self, cx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let shape = cx.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "self_attention",
                lhs: shape,
                rhs: vec![self.dim],
            });
        }
        let (batch, tokens) = (shape[0], shape[1]);
        let q = self.query.forward(cx, x)?;
        let k = self.key.forward(cx, x)?;
        let v = self.value.forward(cx, x)?;
        let q = self.split_heads(cx, q, batch, tokens)?;
        let k = self.split_heads(cx, k, batch, tokens)?;
        let v = self.split_heads(cx, v, batch, tokens)?;
        let scores = cx.tape.bmm(q, k, true)?;
        let scores = cx.tape.scale(scores, 1.0 / (self.head_dim() as f64).sqrt());
        let weights = cx.tape.softmax(scores, 2)?;
        let z = cx.tape.bmm(weights, v, false)?;
        let z = cx.tape.reshape(z, &[batch, self.heads, tokens, self.head_dim()])?;
        let z = cx.tape.permute(z, &[0, 2, 1, 3])?;
        let z = cx.tape.reshape(z, &[batch, tokens, self.dim])?;
        Ok((self.out.forward(cx, z)?, weights))
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(cx, x)?.0)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.out]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }

    pub fn descriptors(&self, batch: usize, tokens: usize) -> Vec<OpDescriptor> {
        let rows = batch * tokens;
        let dh = self.head_dim();
        let score_elems = batch * self.heads * tokens * tokens;
        let mut ops = vec![
            self.query.descriptor(rows),
            self.key.descriptor(rows),
            self.value.descriptor(rows),
        ];
        for _ in 0..batch * self.heads {
            ops.push(OpDescriptor::MatMul { m: tokens, k: dh, n: tokens });
        }
        ops.push(OpDescriptor::Elementwise {
            kind: ElementwiseKind::Scale,
            elements: score_elems,
        });
        ops.push(OpDescriptor::Elementwise {
            kind: ElementwiseKind::Softmax,
            elements: score_elems,
        });
        for _ in 0..batch * self.heads {
            ops.push(OpDescriptor::MatMul { m: tokens, k: tokens, n: dh });
        }
        ops.push(self.out.descriptor(rows));
        ops
    }
}

/// Pre-norm encoder layer: `x + MHA(Norm(x))`, then `+ MLP(Norm(·))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNormParams,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNormParams::new(store, &format!("{name}.norm1"), dim),
            attention: MultiHeadAttention::new(store, &format!("{name}.attention"), dim, heads, rng)?,
            norm2: LayerNormParams::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim * mlp_ratio, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dim * mlp_ratio, dim, rng),
            dropout,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(cx, x)?.0)
    }

    pub fn forward_with_weights(&self, cx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let h = self.norm1.forward(cx, x)?;
        let (h, weights) = self.attention.forward_with_weights(cx, h)?;
        let h = cx.dropout(h, self.dropout)?;
        let x = cx.tape.add(x, h)?;
        let h = self.norm2.forward(cx, x)?;
        let h = self.fc1.forward(cx, h)?;
        let h = cx.tape.gelu(h);
        let h = cx.dropout(h, self.dropout)?;
        let h = self.fc2.forward(cx, h)?;
        let h = cx.dropout(h, self.dropout)?;
        Ok((cx.tape.add(x, h)?, weights))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.norm1.params().to_vec();
        ids.extend(self.attention.params());
        ids.extend(self.norm2.params());
        ids.extend(self.fc1.params());
        ids.extend(self.fc2.params());
        ids
    }

    /// Output-projection and second MLP weights: zeroing these makes the layer an identity.
    pub fn residual_output_params(&self) -> Vec<ParamId> {
        let mut ids = self.attention.out.params().to_vec();
        ids.extend(self.fc2.params());
        ids
    }

    pub fn descriptors(&self, batch: usize, tokens: usize) -> Vec<OpDescriptor> {
        let elems = batch * tokens * self.attention.dim;
        let mut ops = vec![self.norm1.descriptor(elems)];
        ops.extend(self.attention.descriptors(batch, tokens));
        ops.push(merge_descriptor(elems));
        ops.push(self.norm2.descriptor(elems));
        ops.push(self.fc1.descriptor(batch * tokens));
        ops.push(gelu_descriptor(batch * tokens * self.fc1.outputs));
        ops.push(self.fc2.descriptor(batch * tokens));
        ops.push(merge_descriptor(elems));
        ops
    }
}
