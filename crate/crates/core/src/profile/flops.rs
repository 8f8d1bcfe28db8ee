//! Operation-level FLOP accounting.
//!
//! Convention: a multiply and an add each count as one operation, so a multiply-accumulate
//! counts as two. Dense products and convolutions are counted exactly; cheaper operators use
//! the per-element table in [`ElementwiseKind::cost_per_element`]. Tensor-tensor additions
//! (residual merges, broadcasting the classification token over a grid) and pure data
//! movement (reshape, permute, slicing, concatenation) are free.

use std::iter::Sum;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlopCount(pub u64);

impl FlopCount {
    pub const ZERO: FlopCount = FlopCount(0);

    pub fn get(self) -> u64 {
        self.0
    }
}

impl Add for FlopCount {
    type Output = FlopCount;
    fn add(self, rhs: FlopCount) -> FlopCount {
        FlopCount(self.0 + rhs.0)
    }
}

impl AddAssign for FlopCount {
    fn add_assign(&mut self, rhs: FlopCount) {
        self.0 += rhs.0;
    }
}

impl Sum for FlopCount {
    fn sum<I: Iterator<Item = FlopCount>>(iter: I) -> FlopCount {
        iter.fold(FlopCount::ZERO, Add::add)
    }
}

impl std::fmt::Display for FlopCount {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ElementwiseKind {
    /// Tensor + tensor merge (residual connections, broadcast token addition).
    Merge,
    /// Reshape, permute, narrow, concatenation, repetition.
    Movement,
    Scale,
    Mul,
    AffineNorm,
    LayerNorm,
    Gelu,
    Softmax,
    Dropout,
    CrossEntropy,
    AbsError,
}

impl ElementwiseKind {
    pub fn cost_per_element(self) -> u64 {
        match self {
            ElementwiseKind::Merge | ElementwiseKind::Movement | ElementwiseKind::Dropout => 0,
            ElementwiseKind::Scale | ElementwiseKind::Mul => 1,
            // x·α + β
            ElementwiseKind::AffineNorm => 2,
            // mean, centred square, normalise, scale, shift
            ElementwiseKind::LayerNorm => 8,
            ElementwiseKind::Gelu => 8,
            // max, subtract, exp, sum, divide
            ElementwiseKind::Softmax => 5,
            ElementwiseKind::CrossEntropy => 4,
            ElementwiseKind::AbsError => 2,
        }
    }
}

/// A fully shaped operation whose cost can be counted without executing it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OpDescriptor {
    MatMul {
        m: usize,
        k: usize,
        n: usize,
    },
    /// `rows × inputs` times `inputs × outputs`, plus an optional bias add per output element.
    Linear {
        rows: usize,
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Conv2d {
        kernel: (usize, usize),
        in_channels: usize,
        out_channels: usize,
        out_hw: (usize, usize),
        batch: usize,
        bias: bool,
    },
    Elementwise {
        kind: ElementwiseKind,
        elements: usize,
    },
    /// `outputs` windows of `window × window` values, each reduced by `window² − 1` comparisons.
    MaxPool { window: usize, outputs: usize },
    /// Averages `inputs` values into `outputs` means: one add per input, one divide per output.
    Mean { inputs: usize, outputs: usize },
}

pub fn flops_of(op: &OpDescriptor) -> FlopCount {
    let n = match *op {
        OpDescriptor::MatMul { m, k, n } => 2 * m * k * n,
        OpDescriptor::Linear {
            rows,
            inputs,
            outputs,
            bias,
        } => 2 * rows * inputs * outputs + if bias { rows * outputs } else { 0 },
        OpDescriptor::Conv2d {
            kernel: (kh, kw),
            in_channels,
            out_channels,
            out_hw: (h, w),
            batch,
            bias,
        } => {
            let positions = batch * h * w;
            2 * kh * kw * in_channels * out_channels * positions
                + if bias { out_channels * positions } else { 0 }
        }
        OpDescriptor::Elementwise { kind, elements } => {
            return FlopCount(kind.cost_per_element() * elements as u64)
        }
        OpDescriptor::MaxPool { window, outputs } => (window * window).saturating_sub(1) * outputs,
        OpDescriptor::Mean { inputs, outputs } => {
            if inputs == 0 {
                0
            } else {
                inputs + outputs
            }
        }
    };
    FlopCount(n as u64)
}

pub fn total_flops<'a>(ops: impl IntoIterator<Item = &'a OpDescriptor>) -> FlopCount {
    ops.into_iter().map(flops_of).sum()
}
