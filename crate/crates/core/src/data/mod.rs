//! Datasets, checkpoints and result export.

pub mod checkpoint;
pub mod export;
pub mod idx;
pub mod synthetic;

use rand::seq::SliceRandom;

use crate::autodiff::{seeded_rng, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, classes: usize },
    Counts(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Counts(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, classes } => Targets::Classes {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
            Targets::Counts(c) => Targets::Counts(indices.iter().map(|&i| c[i]).collect()),
        }
    }
}

/// Images `[count, H, W, C]` with values in [0, 1] and one target per image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub images: Tensor,
    pub targets: Targets,
    pub split: Split,
}

impl LabeledImageSet {
    pub fn new(images: Tensor, targets: Targets, split: Split) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                values: images.len(),
            });
        }
        if shape[0] != targets.len() {
            return Err(Error::CountMismatch {
                images: shape[0],
                labels: targets.len(),
            });
        }
        if let Targets::Classes { labels, classes } = &targets {
            if let Some(&label) = labels.iter().find(|&&l| l >= *classes) {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: *classes,
                });
            }
        }
        Ok(Self { images, targets, split })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[H, W, C]` of a single image.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn gather_images(&self, indices: &[usize]) -> Tensor {
        let per: usize = self.image_shape().iter().product();
        let values = self.images.values();
        let mut out = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            out.extend_from_slice(&values[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Tensor::new(shape, out).expect("gathered images keep their per-image shape")
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Self::new(self.gather_images(indices), self.targets.select(indices), split)
    }

    /// Moves a seeded random `fraction` of the samples into a validation set.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        let n = self.len();
        let held = ((n as f64) * fraction).round() as usize;
        if held == 0 || held >= n {
            return Err(Error::InvalidConfig(format!(
                "validation fraction {fraction} leaves no samples on one side of a {n}-sample split"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded_rng(seed));
        let (val, train) = order.split_at(held);
        let (mut train, mut val) = (train.to_vec(), val.to_vec());
        train.sort_unstable();
        val.sort_unstable();
        Ok((self.subset(&train, Split::Train)?, self.subset(&val, Split::Validation)?))
    }
}
