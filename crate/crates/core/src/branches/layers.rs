//! Token-grid conversion and the MLP-Mixer / ResMLP layers used inside branches.

use crate::autodiff::nn::{gelu_descriptor, merge_descriptor, movement_descriptor, AffineParams, Ctx, LayerNormParams, Linear};
use crate::autodiff::{ParamId, ParamStore, Rng, Var};
use crate::error::{Error, Result};
use crate::profile::flops::OpDescriptor;
use crate::vit::grid_side;

/// How the classification token enters the patch grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenMode {
    Ignore,
    Add,
    Project,
}

impl TokenMode {
    pub fn channels(self, dim: usize) -> usize {
        match self {
            TokenMode::Project => 2 * dim,
            TokenMode::Ignore | TokenMode::Add => dim,
        }
    }
}

/// Reshapes `[batch, N + 1, d]` into a `[batch, √N, √N, C]` grid where cell `(i, j)` holds
/// patch token `i·√N + j + 1`.
pub fn to_grid(cx: &mut Ctx, x: Var, mode: TokenMode) -> Result<Var> {
    let shape = cx.tape.shape(x).to_vec();
    if shape.len() != 3 || shape[1] < 2 {
        return Err(Error::InvalidShape {
            shape: shape.clone(),
            values: shape.iter().product(),
        });
    }
    let (batch, n, d) = (shape[0], shape[1] - 1, shape[2]);
    let side = grid_side(n)?;
    let patches = cx.tape.narrow(x, 1, 1, n)?;
    let cells = match mode {
        TokenMode::Ignore => patches,
        TokenMode::Add | TokenMode::Project => {
            let cls = cx.tape.narrow(x, 1, 0, 1)?;
            let cls = cx.tape.repeat(cls, 1, n)?;
            if mode == TokenMode::Add {
                cx.tape.add(patches, cls)?
            } else {
                cx.tape.concat(&[patches, cls], 2)?
            }
        }
    };
    cx.tape.reshape(cells, &[batch, side, side, mode.channels(d)])
}

fn check_tokens(cx: &Ctx, x: Var, expected: usize) -> Result<()> {
    let got = cx.tape.shape(x).get(1).copied().unwrap_or(0);
    if got != expected {
        return Err(Error::TokenCountMismatch { expected, got });
    }
    Ok(())
}

/// Token mixing across the token axis of `[batch, T, d]`: `f₂(σ(f₁(xᵀ)))ᵀ`, or a single
/// linear map when `second` is `None`.
fn mix_tokens(cx: &mut Ctx, x: Var, first: &Linear, second: Option<&Linear>) -> Result<Var> {
    let t = cx.tape.permute(x, &[0, 2, 1])?;
    let mut h = first.forward(cx, t)?;
    if let Some(second) = second {
        h = cx.tape.gelu(h);
        h = second.forward(cx, h)?;
    }
    cx.tape.permute(h, &[0, 2, 1])
}

/// One MLP-Mixer layer:
/// `U = X + f₂(σ(f₁(Norm(X)ᵀ)))ᵀ`, `Y = U + f₄(σ(f₃(Norm(U))))`.
#[derive(Clone, Debug)]
pub struct MixerLayer {
    pub norm1: LayerNormParams,
    pub f1: Linear,
    pub f2: Linear,
    pub norm2: LayerNormParams,
    pub f3: Linear,
    pub f4: Linear,
    pub tokens: usize,
}

impl MixerLayer {
    pub fn new(store: &mut ParamStore, name: &str, tokens: usize, dim: usize, expansion: usize, rng: &mut Rng) -> Self {
        Self {
            norm1: LayerNormParams::new(store, &format!("{name}.norm1"), dim),
            f1: Linear::new(store, &format!("{name}.f1"), tokens, tokens * expansion, rng),
            f2: Linear::new(store, &format!("{name}.f2"), tokens * expansion, tokens, rng),
            norm2: LayerNormParams::new(store, &format!("{name}.norm2"), dim),
            f3: Linear::new(store, &format!("{name}.f3"), dim, dim * expansion, rng),
            f4: Linear::new(store, &format!("{name}.f4"), dim * expansion, dim, rng),
            tokens,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        check_tokens(cx, x, self.tokens)?;
        let h = self.norm1.forward(cx, x)?;
        let h = mix_tokens(cx, h, &self.f1, Some(&self.f2))?;
        let u = cx.tape.add(x, h)?;
        let h = self.norm2.forward(cx, u)?;
        let h = self.f3.forward(cx, h)?;
        let h = cx.tape.gelu(h);
        let h = self.f4.forward(cx, h)?;
        cx.tape.add(u, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for p in [self.norm1.params(), self.f1.params(), self.f2.params()] {
            ids.extend(p);
        }
        for p in [self.norm2.params(), self.f3.params(), self.f4.params()] {
            ids.extend(p);
        }
        ids
    }

    /// Weights and biases of f₁..f₄.
    pub fn mixing_params(&self) -> Vec<ParamId> {
        [&self.f1, &self.f2, &self.f3, &self.f4].iter().flat_map(|l| l.params()).collect()
    }

    pub fn descriptors(&self, batch: usize) -> Vec<OpDescriptor> {
        let dim = self.norm1.dim;
        let elems = batch * self.tokens * dim;
        vec![
            self.norm1.descriptor(elems),
            movement_descriptor(elems),
            self.f1.descriptor(batch * dim),
            gelu_descriptor(batch * dim * self.f1.outputs),
            self.f2.descriptor(batch * dim),
            movement_descriptor(elems),
            merge_descriptor(elems),
            self.norm2.descriptor(elems),
            self.f3.descriptor(batch * self.tokens),
            gelu_descriptor(batch * self.tokens * self.f3.outputs),
            self.f4.descriptor(batch * self.tokens),
            merge_descriptor(elems),
        ]
    }
}

/// One ResMLP layer with affine normalisation everywhere:
/// `U = X + Aff(f₁(Aff(X)ᵀ)ᵀ)`, `Y = U + Aff(f₃(σ(f₂(Aff(U)))))`.
#[derive(Clone, Debug)]
pub struct ResMlpLayer {
    pub pre_tokens: AffineParams,
    pub f1: Linear,
    pub post_tokens: AffineParams,
    pub pre_channels: AffineParams,
    pub f2: Linear,
    pub f3: Linear,
    pub post_channels: AffineParams,
    pub tokens: usize,
}

impl ResMlpLayer {
    pub fn new(store: &mut ParamStore, name: &str, tokens: usize, dim: usize, expansion: usize, rng: &mut Rng) -> Self {
        Self {
            pre_tokens: AffineParams::new(store, &format!("{name}.aff1"), dim),
            f1: Linear::new(store, &format!("{name}.f1"), tokens, tokens, rng),
            post_tokens: AffineParams::new(store, &format!("{name}.aff2"), dim),
            pre_channels: AffineParams::new(store, &format!("{name}.aff3"), dim),
            f2: Linear::new(store, &format!("{name}.f2"), dim, dim * expansion, rng),
            f3: Linear::new(store, &format!("{name}.f3"), dim * expansion, dim, rng),
            post_channels: AffineParams::new(store, &format!("{name}.aff4"), dim),
            tokens,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        check_tokens(cx, x, self.tokens)?;
        let h = self.pre_tokens.forward(cx, x)?;
        let h = mix_tokens(cx, h, &self.f1, None)?;
        let h = self.post_tokens.forward(cx, h)?;
        let u = cx.tape.add(x, h)?;
        let h = self.pre_channels.forward(cx, u)?;
        let h = self.f2.forward(cx, h)?;
        let h = cx.tape.gelu(h);
        let h = self.f3.forward(cx, h)?;
        let h = self.post_channels.forward(cx, h)?;
        cx.tape.add(u, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for p in [self.pre_tokens.params(), self.f1.params(), self.post_tokens.params()] {
            ids.extend(p);
        }
        for p in [self.pre_channels.params(), self.f2.params(), self.f3.params(), self.post_channels.params()] {
            ids.extend(p);
        }
        ids
    }

    /// Weights and biases of f₁..f₃.
    pub fn mixing_params(&self) -> Vec<ParamId> {
        [&self.f1, &self.f2, &self.f3].iter().flat_map(|l| l.params()).collect()
    }

    pub fn descriptors(&self, batch: usize) -> Vec<OpDescriptor> {
        let dim = self.pre_tokens.dim;
        let elems = batch * self.tokens * dim;
        vec![
            self.pre_tokens.descriptor(elems),
            movement_descriptor(elems),
            self.f1.descriptor(batch * dim),
            movement_descriptor(elems),
            self.post_tokens.descriptor(elems),
            merge_descriptor(elems),
            self.pre_channels.descriptor(elems),
            self.f2.descriptor(batch * self.tokens),
            gelu_descriptor(batch * self.tokens * self.f2.outputs),
            self.f3.descriptor(batch * self.tokens),
            self.post_channels.descriptor(elems),
            merge_descriptor(elems),
        ]
    }
}
