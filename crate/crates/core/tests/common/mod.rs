//! Independent test oracles: central finite differences and small helpers.
#![allow(dead_code)]

use multiexit::autodiff::{seeded_rng, Ctx, ParamId, ParamStore, Tape, Tensor, Var};
use multiexit::Result;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// Fixed pseudo-random projection weights so that `Σ out ⊙ r` has a non-trivial gradient.
pub fn projection(n: usize) -> Vec<f64> {
    let mut rng = seeded_rng(0xC0FFEE ^ n as u64);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn project(tape: &mut Tape, out: Var) -> Var {
    let shape = tape.shape(out).to_vec();
    let r = projection(tape.value(out).len());
    let r = tape.constant_from(shape, r).unwrap();
    let prod = tape.mul(out, r).unwrap();
    tape.sum(prod)
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between two gradient vectors, with an absolute
/// floor so that two (numerically) zero gradients compare equal.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-7)
}

/// Picks at most `limit` coordinates of a tensor with `n` elements.
fn coordinates(n: usize, limit: usize, salt: u64) -> Vec<usize> {
    if n <= limit {
        return (0..n).collect();
    }
    let mut rng = seeded_rng(salt);
    let mut picked: Vec<usize> = (0..limit).map(|_| rng.random_range(0..n)).collect();
    picked.sort_unstable();
    picked.dedup();
    picked
}

/// Central finite-difference check of `f` with respect to every input tensor.
/// Returns the worst relative error over the inputs.
pub fn gradcheck(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t)).collect();
        let out = f(&mut tape, &vars).unwrap();
        let loss = project(&mut tape, out);
        tape.value(loss)[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let loss = project(&mut tape, out);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, (v, t)) in vars.iter().zip(inputs).enumerate() {
        let analytic_full = grads.get(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
        let coords = coordinates(t.len(), 48, i as u64);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &j in &coords {
            let mut plus = inputs.to_vec();
            plus[i].values_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].values_mut()[j] -= FD_STEP;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * FD_STEP));
            analytic.push(analytic_full[j]);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Finite-difference check of a parameterised forward with respect to parameters in `store`
/// and to the constant inputs. Dropout is disabled (evaluation context).
pub fn gradcheck_params(
    store: &ParamStore,
    params: &[ParamId],
    inputs: &[Tensor],
    f: impl Fn(&mut Ctx, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |store: &ParamStore, values: &[Tensor]| -> f64 {
        let mut cx = Ctx::eval(store);
        let vars: Vec<Var> = values.iter().map(|t| cx.tape.constant(t)).collect();
        let out = f(&mut cx, &vars).unwrap();
        let loss = project(&mut cx.tape, out);
        cx.tape.value(loss)[0]
    };
    let mut cx = Ctx::eval(store);
    let vars: Vec<Var> = inputs.iter().map(|t| cx.tape.variable(t)).collect();
    let out = f(&mut cx, &vars).unwrap();
    let loss = project(&mut cx.tape, out);
    let grads = cx.tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, &id) in params.iter().enumerate() {
        let v = cx.tape.param(store, id);
        let n = store.get(id).len();
        let full = grads.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for j in coordinates(n, 6, 1000 + i as u64) {
            let mut plus = store.clone();
            plus.get_mut(id).values_mut()[j] += FD_STEP;
            let mut minus = store.clone();
            minus.get_mut(id).values_mut()[j] -= FD_STEP;
            numeric.push((eval(&plus, inputs) - eval(&minus, inputs)) / (2.0 * FD_STEP));
            analytic.push(full[j]);
        }
    }
    worst = worst.max(rel_err(&analytic, &numeric));
    for (i, (v, t)) in vars.iter().zip(inputs).enumerate() {
        let full = grads.get(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for j in coordinates(t.len(), 32, 500 + i as u64) {
            let mut plus = inputs.to_vec();
            plus[i].values_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].values_mut()[j] -= FD_STEP;
            numeric.push((eval(store, &plus) - eval(store, &minus)) / (2.0 * FD_STEP));
            analytic.push(full[j]);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}
