//! Early-exit branches: each consumes the sequence P^b after encoder layer b and produces an
//! early result of shape `[batch, outputs]`.

mod layers;

pub use layers::{to_grid, MixerLayer, ResMlpLayer, TokenMode};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{gelu_descriptor, global_avg_pool, merge_descriptor, Ctx, LayerNormParams, Linear, INIT_STD};
use crate::autodiff::{ParamId, ParamStore, Rng, Tensor, Var};
use crate::error::{Error, Result};
use crate::profile::flops::OpDescriptor;
use crate::vit::{class_token, grid_side, EncoderLayer, ViTConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BranchArchitecture {
    #[serde(rename = "mlp-ee")]
    MlpEe,
    #[serde(rename = "cnn-ignore-ee")]
    CnnIgnoreEe,
    #[serde(rename = "cnn-add-ee")]
    CnnAddEe,
    #[serde(rename = "cnn-project-ee")]
    CnnProjectEe,
    #[serde(rename = "vit-ee")]
    VitEe,
    #[serde(rename = "mlp-mixer-ee")]
    MlpMixerEe,
    #[serde(rename = "resmlp-ee")]
    ResMlpEe,
}

impl BranchArchitecture {
    pub const ALL: [BranchArchitecture; 7] = [
        BranchArchitecture::MlpEe,
        BranchArchitecture::CnnIgnoreEe,
        BranchArchitecture::CnnAddEe,
        BranchArchitecture::CnnProjectEe,
        BranchArchitecture::VitEe,
        BranchArchitecture::MlpMixerEe,
        BranchArchitecture::ResMlpEe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BranchArchitecture::MlpEe => "mlp-ee",
            BranchArchitecture::CnnIgnoreEe => "cnn-ignore-ee",
            BranchArchitecture::CnnAddEe => "cnn-add-ee",
            BranchArchitecture::CnnProjectEe => "cnn-project-ee",
            BranchArchitecture::VitEe => "vit-ee",
            BranchArchitecture::MlpMixerEe => "mlp-mixer-ee",
            BranchArchitecture::ResMlpEe => "resmlp-ee",
        }
    }

    pub fn token_mode(self) -> Option<TokenMode> {
        match self {
            BranchArchitecture::CnnIgnoreEe => Some(TokenMode::Ignore),
            BranchArchitecture::CnnAddEe => Some(TokenMode::Add),
            BranchArchitecture::CnnProjectEe => Some(TokenMode::Project),
            _ => None,
        }
    }
}

impl fmt::Display for BranchArchitecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BranchArchitecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownArchitecture(s.to_string()))
    }
}

/// Hyperparameters shared by every branch attached to one backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub dim: usize,
    /// Tokens per sequence, classification token included.
    pub tokens: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub outputs: usize,
    pub dropout: f64,
    pub kernel: usize,
    pub conv_channels: usize,
    /// Hidden expansion of the mixer and ResMLP sublayers.
    pub expansion: usize,
    /// Whether mixer / ResMLP pooling averages over the classification token too.
    pub pool_class_token: bool,
}

impl BranchConfig {
    pub fn for_backbone(vit: &ViTConfig) -> Self {
        Self {
            dim: vit.dim,
            tokens: vit.tokens(),
            heads: vit.heads,
            mlp_ratio: vit.mlp_ratio,
            outputs: vit.outputs,
            dropout: vit.dropout,
            kernel: 3,
            conv_channels: (vit.dim / 8).max(1),
            expansion: 2,
            pool_class_token: true,
        }
    }

    fn grid_side(&self) -> Result<usize> {
        grid_side(self.tokens - 1)
    }

    /// Spatial side after the 2×2 stride-2 max pool (window clamped to the grid).
    fn pooled_side(&self) -> Result<usize> {
        let side = self.grid_side()?;
        let window = side.min(2);
        Ok((side - window) / window + 1)
    }
}

/// Three dense layers with a dropout between each pair: `in → 2d → d → outputs`.
#[derive(Clone, Debug)]
pub struct BranchHeadMLP {
    pub dense: [Linear; 3],
    pub dropout: f64,
}

impl BranchHeadMLP {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, config: &BranchConfig, rng: &mut Rng) -> Self {
        let d = config.dim;
        Self {
            dense: [
                Linear::new(store, &format!("{name}.dense1"), inputs, 2 * d, rng),
                Linear::new(store, &format!("{name}.dense2"), 2 * d, d, rng),
                Linear::new(store, &format!("{name}.dense3"), d, config.outputs, rng),
            ],
            dropout: config.dropout,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.dense.iter().enumerate() {
            h = layer.forward(cx, h)?;
            if i < 2 {
                h = cx.tape.gelu(h);
                h = cx.dropout(h, self.dropout)?;
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.dense.iter().flat_map(|l| l.params()).collect()
    }

    pub fn descriptors(&self, batch: usize) -> Vec<OpDescriptor> {
        let mut ops = Vec::new();
        for (i, layer) in self.dense.iter().enumerate() {
            ops.push(layer.descriptor(batch));
            if i < 2 {
                ops.push(gelu_descriptor(batch * layer.outputs));
            }
        }
        ops
    }
}

#[derive(Clone, Debug)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

#[derive(Clone, Debug)]
pub enum BranchBody {
    Mlp { norm: LayerNormParams },
    Cnn { mode: TokenMode, conv: ConvParams },
    Vit { layer: EncoderLayer, norm: LayerNormParams },
    Mixer { layer: MixerLayer },
    ResMlp { layer: ResMlpLayer },
}

/// One early exit: an architecture-specific body followed by a [`BranchHeadMLP`].
#[derive(Clone, Debug)]
pub struct ExitBranch {
    pub arch: BranchArchitecture,
    pub config: BranchConfig,
    pub body: BranchBody,
    pub head: BranchHeadMLP,
}

impl ExitBranch {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        arch: BranchArchitecture,
        config: &BranchConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let d = config.dim;
        let (body, head_inputs) = match arch {
            BranchArchitecture::MlpEe => (
                BranchBody::Mlp {
                    norm: LayerNormParams::new(store, &format!("{name}.norm"), d),
                },
                d,
            ),
            BranchArchitecture::CnnIgnoreEe | BranchArchitecture::CnnAddEe | BranchArchitecture::CnnProjectEe => {
                let mode = arch.token_mode().expect("cnn architectures carry a token mode");
                let (k, cin, cout) = (config.kernel, mode.channels(d), config.conv_channels);
                let conv = ConvParams {
                    weight: store.add(
                        format!("{name}.conv.weight"),
                        Tensor::trunc_normal(&[k, k, cin, cout], INIT_STD, rng),
                    ),
                    bias: store.add(format!("{name}.conv.bias"), Tensor::zeros(&[cout])),
                    in_channels: cin,
                    out_channels: cout,
                    kernel: k,
                };
                let pooled = config.pooled_side()?;
                (BranchBody::Cnn { mode, conv }, pooled * pooled * cout)
            }
            BranchArchitecture::VitEe => (
                BranchBody::Vit {
                    layer: EncoderLayer::new(
                        store,
                        &format!("{name}.encoder"),
                        d,
                        config.heads,
                        config.mlp_ratio,
                        config.dropout,
                        rng,
                    )?,
                    norm: LayerNormParams::new(store, &format!("{name}.norm"), d),
                },
                d,
            ),
            BranchArchitecture::MlpMixerEe => (
                BranchBody::Mixer {
                    layer: MixerLayer::new(store, &format!("{name}.mixer"), config.tokens, d, config.expansion, rng),
                },
                d,
            ),
            BranchArchitecture::ResMlpEe => (
                BranchBody::ResMlp {
                    layer: ResMlpLayer::new(store, &format!("{name}.resmlp"), config.tokens, d, config.expansion, rng),
                },
                d,
            ),
        };
        let head = BranchHeadMLP::new(store, &format!("{name}.head"), head_inputs, config, rng);
        Ok(Self {
            arch,
            config: config.clone(),
            body,
            head,
        })
    }

    /// Maps `P^b: [batch, N + 1, d]` to `[batch, outputs]`.
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = cx.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.config.dim {
            return Err(Error::ShapeMismatch {
                op: "branch",
                lhs: shape,
                rhs: vec![self.config.tokens, self.config.dim],
            });
        }
        let batch = shape[0];
        let features = match &self.body {
            BranchBody::Mlp { norm } => {
                let normed = norm.forward(cx, x)?;
                class_token(cx, normed)?
            }
            BranchBody::Cnn { mode, conv } => {
                let grid = to_grid(cx, x, *mode)?;
                let (w, b) = (cx.param(conv.weight), cx.param(conv.bias));
                let h = cx.tape.conv2d(grid, w, Some(b), 1, conv.kernel / 2)?;
                let h = cx.tape.gelu(h);
                let side = cx.tape.shape(h)[1];
                let window = side.min(2);
                let h = cx.tape.maxpool2d(h, window, window)?;
                let flat: usize = cx.tape.shape(h)[1..].iter().product();
                cx.tape.reshape(h, &[batch, flat])?
            }
            BranchBody::Vit { layer, norm } => {
                let h = layer.forward(cx, x)?;
                let h = norm.forward(cx, h)?;
                class_token(cx, h)?
            }
            BranchBody::Mixer { layer } => {
                let h = layer.forward(cx, x)?;
                self.pool(cx, h)?
            }
            BranchBody::ResMlp { layer } => {
                let h = layer.forward(cx, x)?;
                self.pool(cx, h)?
            }
        };
        self.head.forward(cx, features)
    }

    fn pool(&self, cx: &mut Ctx, h: Var) -> Result<Var> {
        if self.config.pool_class_token {
            global_avg_pool(&mut cx.tape, h)
        } else {
            let n = cx.tape.shape(h)[1] - 1;
            let patches = cx.tape.narrow(h, 1, 1, n)?;
            global_avg_pool(&mut cx.tape, patches)
        }
    }

    pub fn body_params(&self) -> Vec<ParamId> {
        match &self.body {
            BranchBody::Mlp { norm } => norm.params().to_vec(),
            BranchBody::Cnn { conv, .. } => vec![conv.weight, conv.bias],
            BranchBody::Vit { layer, norm } => {
                let mut ids = layer.params();
                ids.extend(norm.params());
                ids
            }
            BranchBody::Mixer { layer } => layer.params(),
            BranchBody::ResMlp { layer } => layer.params(),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.body_params();
        ids.extend(self.head.params());
        ids
    }

    /// Cost of one forward pass over `batch` sequences. Independent of where the branch sits.
    pub fn descriptors(&self, batch: usize) -> Result<Vec<OpDescriptor>> {
        let c = &self.config;
        let elems = batch * c.tokens * c.dim;
        let mut ops = match &self.body {
            BranchBody::Mlp { norm } => vec![norm.descriptor(elems)],
            BranchBody::Cnn { mode, conv } => {
                let side = c.grid_side()?;
                let pooled = c.pooled_side()?;
                let window = side.min(2);
                let mut ops = Vec::new();
                if *mode == TokenMode::Add {
                    ops.push(merge_descriptor(batch * (c.tokens - 1) * c.dim));
                }
                let out_side = side + 2 * (conv.kernel / 2) - conv.kernel + 1;
                ops.push(OpDescriptor::Conv2d {
                    kernel: (conv.kernel, conv.kernel),
                    in_channels: conv.in_channels,
                    out_channels: conv.out_channels,
                    out_hw: (out_side, out_side),
                    batch,
                    bias: true,
                });
                ops.push(gelu_descriptor(batch * out_side * out_side * conv.out_channels));
                ops.push(OpDescriptor::MaxPool {
                    window,
                    outputs: batch * pooled * pooled * conv.out_channels,
                });
                ops
            }
            BranchBody::Vit { layer, norm } => {
                let mut ops = layer.descriptors(batch, c.tokens);
                ops.push(norm.descriptor(elems));
                ops
            }
            BranchBody::Mixer { layer } => {
                let mut ops = layer.descriptors(batch);
                ops.push(self.pool_descriptor(batch));
                ops
            }
            BranchBody::ResMlp { layer } => {
                let mut ops = layer.descriptors(batch);
                ops.push(self.pool_descriptor(batch));
                ops
            }
        };
        ops.extend(self.head.descriptors(batch));
        Ok(ops)
    }

    fn pool_descriptor(&self, batch: usize) -> OpDescriptor {
        let c = &self.config;
        let pooled_tokens = if c.pool_class_token { c.tokens } else { c.tokens - 1 };
        OpDescriptor::Mean {
            inputs: batch * pooled_tokens * c.dim,
            outputs: batch * c.dim,
        }
    }
}
