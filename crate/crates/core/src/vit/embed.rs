use crate::autodiff::nn::{merge_descriptor, Ctx, Linear, INIT_STD};
use crate::autodiff::{ParamId, ParamStore, Rng, Tensor, Var};
use crate::error::{Error, Result};
use crate::profile::flops::OpDescriptor;

use super::ViTConfig;

/// Cuts `images: [batch, H, W, C]` into non-overlapping `patch × patch` tiles, returned as
/// `[batch, N, patch·patch·C]`. Tiles are ordered row-major over the grid and each tile is
/// flattened row-major (row, column, channel).
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != shape[2] || patch == 0 || !shape[1].is_multiple_of(patch) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            values: images.len(),
        });
    }
    let (batch, side, channels) = (shape[0], shape[1], shape[3]);
    let grid = side / patch;
    let per = patch * patch * channels;
    let x = images.values();
    let mut out = Vec::with_capacity(images.len());
    for b in 0..batch {
        for gi in 0..grid {
            for gj in 0..grid {
                for r in 0..patch {
                    let row = gi * patch + r;
                    let start = ((b * side + row) * side + gj * patch) * channels;
                    out.extend_from_slice(&x[start..start + patch * channels]);
                }
            }
        }
    }
    Tensor::new(vec![batch, grid * grid, per], out)
}

/// Patch projection, classification token and learned positional embedding.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub class_token: ParamId,
    pub position: ParamId,
    pub dropout: f64,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, name: &str, config: &ViTConfig, rng: &mut Rng) -> Self {
        let d = config.dim;
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), config.patch_values(), d, rng),
            class_token: store.add(format!("{name}.class_token"), Tensor::zeros(&[1, 1, d])),
            position: store.add(
                format!("{name}.position"),
                Tensor::trunc_normal(&[config.tokens(), d], INIT_STD, rng),
            ),
            dropout: config.dropout,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, images: &Tensor, config: &ViTConfig) -> Result<Var> {
        let s = images.shape();
        if s.len() != 4 || s[1] != config.image_size || s[2] != config.image_size || s[3] != config.channels {
            return Err(Error::ShapeMismatch {
                op: "patch_embed",
                lhs: s.to_vec(),
                rhs: vec![config.image_size, config.image_size, config.channels],
            });
        }
        let batch = s[0];
        let patches = patchify(images, config.patch_size)?;
        let patches = cx.tape.constant(&patches);
        let projected = self.proj.forward(cx, patches)?;
        let cls = cx.param(self.class_token);
        let cls = cx.tape.repeat(cls, 0, batch)?;
        let tokens = cx.tape.concat(&[cls, projected], 1)?;
        let pos = cx.param(self.position);
        let tokens = cx.tape.add_broadcast(tokens, pos)?;
        cx.dropout(tokens, self.dropout)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.proj.params().to_vec();
        ids.extend([self.class_token, self.position]);
        ids
    }

    pub fn descriptors(&self, batch: usize, config: &ViTConfig) -> Vec<OpDescriptor> {
        vec![
            self.proj.descriptor(batch * config.num_patches()),
            merge_descriptor(batch * config.tokens() * config.dim),
        ]
    }
}
