//! Parameterised layers and the forward context they run in.

use super::tape::{Tape, Var};
use super::tensor::{ParamId, ParamStore, Tensor};
use super::Rng;
use crate::error::Result;
use crate::profile::flops::{ElementwiseKind, OpDescriptor};

pub const INIT_STD: f64 = 0.02;

/// A tape plus the parameter store it reads from. Dropout is active iff an RNG is supplied.
pub struct Ctx<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    rng: Option<&'a mut Rng>,
}

impl<'a> Ctx<'a> {
    pub fn eval(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            rng: None,
        }
    }

    pub fn train(store: &'a ParamStore, rng: &'a mut Rng) -> Self {
        Self {
            tape: Tape::new(),
            store,
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        self.tape.dropout(x, rate, self.rng.as_deref_mut())
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }
}

/// Dense layer `x·W + b` with `W: inputs × outputs`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::trunc_normal(&[inputs, outputs], INIT_STD, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (cx.param(self.weight), cx.param(self.bias));
        cx.tape.linear(x, w, Some(b))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn descriptor(&self, rows: usize) -> OpDescriptor {
        OpDescriptor::Linear {
            rows,
            inputs: self.inputs,
            outputs: self.outputs,
            bias: true,
        }
    }
}

/// Layer normalisation over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            dim,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (cx.param(self.gamma), cx.param(self.beta));
        let axis = cx.tape.shape(x).len() - 1;
        cx.tape.layer_norm(x, g, b, axis)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }

    pub fn descriptor(&self, elements: usize) -> OpDescriptor {
        OpDescriptor::Elementwise {
            kind: ElementwiseKind::LayerNorm,
            elements,
        }
    }
}

/// Statistics-free `Diag(α)·x + β` over the last axis.
#[derive(Clone, Debug)]
pub struct AffineParams {
    pub alpha: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl AffineParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            alpha: store.add(format!("{name}.alpha"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            dim,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (a, b) = (cx.param(self.alpha), cx.param(self.beta));
        cx.tape.affine(x, a, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.alpha, self.beta]
    }

    pub fn descriptor(&self, elements: usize) -> OpDescriptor {
        OpDescriptor::Elementwise {
            kind: ElementwiseKind::AffineNorm,
            elements,
        }
    }
}

pub fn gelu_descriptor(elements: usize) -> OpDescriptor {
    OpDescriptor::Elementwise {
        kind: ElementwiseKind::Gelu,
        elements,
    }
}

pub fn merge_descriptor(elements: usize) -> OpDescriptor {
    OpDescriptor::Elementwise {
        kind: ElementwiseKind::Merge,
        elements,
    }
}

pub fn movement_descriptor(elements: usize) -> OpDescriptor {
    OpDescriptor::Elementwise {
        kind: ElementwiseKind::Movement,
        elements,
    }
}

/// Mean over the token axis of `[batch, tokens, channels]` or the spatial axes of
/// `[batch, H, W, channels]`; channels are preserved.
pub fn global_avg_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    match shape.len() {
        3 => tape.mean(x, 1),
        4 => {
            let flat = tape.reshape(x, &[shape[0], shape[1] * shape[2], shape[3]])?;
            tape.mean(flat, 1)
        }
        rank => Err(crate::error::Error::AxisOutOfRange { axis: 1, rank }),
    }
}
