//! Seeded synthetic tasks: blob counting (a stand-in for crowd counting) and a linearly
//! separable two-class image set.

use rand::Rng as _;

use super::{LabeledImageSet, Split, Targets};
use crate::autodiff::{seeded_rng, Tensor};
use crate::error::{Error, Result};

pub const MAX_BLOBS: usize = 20;
const BLOB_SIGMA: f64 = 1.0;

/// `n` single-channel `size × size` images, each holding k ∈ [0, 20] Gaussian blobs drawn
/// uniformly at random positions; the target is k. Pixel values are clamped to [0, 1].
pub fn gen_count_regression(n: usize, size: usize, seed: u64) -> Result<LabeledImageSet> {
    if n == 0 || size == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = seeded_rng(seed);
    let mut values = vec![0.0; n * size * size];
    let mut counts = Vec::with_capacity(n);
    let radius = (3.0 * BLOB_SIGMA).ceil() as isize;
    for img in values.chunks_mut(size * size) {
        let k = rng.random_range(0..=MAX_BLOBS);
        for _ in 0..k {
            let cy = rng.random_range(0.0..size as f64);
            let cx = rng.random_range(0.0..size as f64);
            let (iy, ix) = (cy as isize, cx as isize);
            for y in (iy - radius).max(0)..(iy + radius + 1).min(size as isize) {
                for x in (ix - radius).max(0)..(ix + radius + 1).min(size as isize) {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    img[y as usize * size + x as usize] += (-(dy * dy + dx * dx) / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp();
                }
            }
        }
        img.iter_mut().for_each(|v| *v = v.min(1.0));
        counts.push(k as f64);
    }
    let images = Tensor::new(vec![n, size, size, 1], values)?;
    LabeledImageSet::new(images, Targets::Counts(counts), Split::Train)
}

/// Two classes told apart by which half of the image is brighter, plus uniform noise.
pub fn gen_two_halves(n: usize, size: usize, seed: u64) -> Result<LabeledImageSet> {
    if n == 0 || size < 2 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = seeded_rng(seed);
    let mut values = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        for _ in 0..size {
            for x in 0..size {
                let bright = (x < size / 2) == (label == 0);
                let base = if bright { 0.6 } else { 0.2 };
                values.push(base + rng.random_range(0.0..0.3));
            }
        }
        labels.push(label);
    }
    let images = Tensor::new(vec![n, size, size, 1], values)?;
    LabeledImageSet::new(images, Targets::Classes { labels, classes: 2 }, Split::Train)
}
