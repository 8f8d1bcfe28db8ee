//! Vision Transformer backbone: patchify, embed, prepend the classification token, run the
//! encoder stack and classify from the final classification token.

mod attention;
mod embed;

pub use attention::{EncoderLayer, MultiHeadAttention};
pub use embed::{patchify, PatchEmbed};

use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{Ctx, LayerNormParams, Linear};
use crate::autodiff::{ParamId, ParamStore, Rng, Tensor, Var};
use crate::error::{Error, Result};
use crate::profile::flops::OpDescriptor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    /// Class count, or 1 for count regression.
    pub outputs: usize,
    pub dropout: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 28,
            patch_size: 7,
            channels: 1,
            dim: 64,
            heads: 4,
            depth: 6,
            mlp_ratio: 2,
            outputs: 10,
            dropout: 0.1,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!("patch size {} must divide image size {}", self.patch_size, self.image_size));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("head count {} must divide embed dim {}", self.heads, self.dim));
        }
        if self.depth == 0 {
            return bad("encoder depth must be at least 1".into());
        }
        if self.channels == 0 || self.outputs == 0 || self.mlp_ratio == 0 {
            return bad("channels, outputs and mlp ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidRate(self.dropout));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Tokens per sequence, classification token included.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_values(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Tokens at an encoder boundary, `[batch, N + 1, d]`; index 0 along the token axis is the
/// classification token and N is a perfect square.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    tokens: Tensor,
}

impl PatchSequence {
    pub fn new(tokens: Tensor) -> Result<Self> {
        let shape = tokens.shape();
        if shape.len() != 3 {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                values: tokens.len(),
            });
        }
        grid_side(shape[1] - 1)?;
        Ok(Self { tokens })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tokens
    }

    pub fn into_tensor(self) -> Tensor {
        self.tokens
    }

    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn num_patches(&self) -> usize {
        self.tokens.shape()[1] - 1
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }

    pub fn token(&self, sample: usize, index: usize) -> &[f64] {
        let (t, d) = (self.tokens.shape()[1], self.dim());
        let start = (sample * t + index) * d;
        &self.tokens.values()[start..start + d]
    }

    /// Samples at `indices`, stacked in that order.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let per = self.tokens.len() / self.batch();
        let values = self.tokens.values();
        let mut out = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            out.extend_from_slice(&values[i * per..(i + 1) * per]);
        }
        let mut shape = self.tokens.shape().to_vec();
        shape[0] = indices.len();
        Tensor::new(shape, out).expect("gathered samples keep their per-sample shape")
    }

    /// Copies samples `start..start + len` into a new sequence.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        let per = self.tokens.len() / self.batch();
        let values = self.tokens.values()[start * per..(start + len) * per].to_vec();
        Self::new(Tensor::new(vec![len, self.tokens.shape()[1], self.dim()], values)?)
    }
}

/// Side of the square patch grid holding `patches` tokens.
pub fn grid_side(patches: usize) -> Result<usize> {
    let side = (patches as f64).sqrt().round() as usize;
    if side == 0 || side * side != patches {
        return Err(Error::NonSquareTokens(patches));
    }
    Ok(side)
}

/// Everything `forward_collect` produces: the sequence after every encoder layer and the logits.
pub struct Collected {
    pub sequences: Vec<Var>,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct VisionTransformer {
    pub config: ViTConfig,
    pub embed: PatchEmbed,
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNormParams,
    pub head: Linear,
}

impl VisionTransformer {
    pub fn new(store: &mut ParamStore, prefix: &str, config: ViTConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let embed = PatchEmbed::new(store, &format!("{prefix}.embed"), &config, rng);
        let layers = (0..config.depth)
            .map(|i| {
                EncoderLayer::new(
                    store,
                    &format!("{prefix}.layer{}", i + 1),
                    config.dim,
                    config.heads,
                    config.mlp_ratio,
                    config.dropout,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNormParams::new(store, &format!("{prefix}.norm"), config.dim);
        let head = Linear::new(store, &format!("{prefix}.head"), config.dim, config.outputs, rng);
        Ok(Self {
            config,
            embed,
            layers,
            norm,
            head,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Embeds `images: [batch, H, W, C]` into the initial sequence P^0.
    pub fn embed(&self, cx: &mut Ctx, images: &Tensor) -> Result<Var> {
        self.embed.forward(cx, images, &self.config)
    }

    /// Runs encoder layer `b` (1-based) on P^{b-1}.
    pub fn layer(&self, cx: &mut Ctx, b: usize, x: Var) -> Result<Var> {
        self.layers[b - 1].forward(cx, x)
    }

    /// Classification head on the classification token of the final sequence.
    pub fn head(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let cls = class_token(cx, x)?;
        let normed = self.norm.forward(cx, cls)?;
        self.head.forward(cx, normed)
    }

    pub fn forward_collect(&self, cx: &mut Ctx, images: &Tensor) -> Result<Collected> {
        let mut x = self.embed(cx, images)?;
        let mut sequences = Vec::with_capacity(self.depth());
        for b in 1..=self.depth() {
            x = self.layer(cx, b, x)?;
            sequences.push(x);
        }
        let logits = self.head(cx, x)?;
        Ok(Collected { sequences, logits })
    }

    pub fn forward(&self, cx: &mut Ctx, images: &Tensor) -> Result<Var> {
        Ok(self.forward_collect(cx, images)?.logits)
    }

    /// Parameters of the embedding plus layers `1..=b`.
    pub fn prefix_params(&self, b: usize) -> Vec<ParamId> {
        let mut ids = self.embed.params();
        for layer in &self.layers[..b] {
            ids.extend(layer.params());
        }
        ids
    }

    pub fn layer_params(&self, b: usize) -> Vec<ParamId> {
        self.layers[b - 1].params()
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        let mut ids = self.norm.params().to_vec();
        ids.extend(self.head.params());
        ids
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.prefix_params(self.depth());
        ids.extend(self.head_params());
        ids
    }

    pub fn embed_descriptors(&self, batch: usize) -> Vec<OpDescriptor> {
        self.embed.descriptors(batch, &self.config)
    }

    pub fn layer_descriptors(&self, batch: usize) -> Vec<OpDescriptor> {
        self.layers[0].descriptors(batch, self.config.tokens())
    }

    pub fn head_descriptors(&self, batch: usize) -> Vec<OpDescriptor> {
        vec![
            self.norm.descriptor(batch * self.config.dim),
            self.head.descriptor(batch),
        ]
    }
}

/// Token 0 of `[batch, tokens, d]` as `[batch, d]`.
pub fn class_token(cx: &mut Ctx, x: Var) -> Result<Var> {
    let shape = cx.tape.shape(x).to_vec();
    let cls = cx.tape.narrow(x, 1, 0, 1)?;
    cx.tape.reshape(cls, &[shape[0], shape[2]])
}
