//! Anytime inference: run the backbone layer by layer, evaluate each attached exit as soon as
//! its layer completes (cheapest first), and answer with the deepest exit finished within the budget or before
//! an interrupt.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::autodiff::nn::Ctx;
use crate::autodiff::Tensor;
use crate::branches::{BranchArchitecture, ExitBranch};
use crate::error::{Error, Result};
use crate::profile::{backbone_flops, exit_flops, final_flops, ExitKind, ExitProfile, FlopCount};
use crate::train::{ExitId, MultiExitModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BudgetPolicy {
    /// Stop before any exit or layer whose cumulative single-sample cost would exceed this many
    /// FLOPs.
    Flops(FlopCount),
    /// Run until the interrupt flag is raised or the network is exhausted.
    Interrupt,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnytimeResult {
    /// Raw outputs of the exit used, `[batch × outputs]` row-major.
    pub prediction: Vec<f64>,
    pub exit: ExitId,
    pub location: usize,
    /// Cumulative FLOPs of the exit used.
    pub flops: FlopCount,
    pub exits_evaluated: usize,
}

/// Reported to the hook after every completed exit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExitEvent {
    pub exit: ExitId,
    pub flops: FlopCount,
    /// How many exits have completed so far, this one included.
    pub completed: usize,
}

/// Cooperative cancellation flag shared between an interrupter and the inference worker. It is
/// polled between layer and exit evaluations, never inside one.
#[derive(Clone, Debug, Default)]
pub struct Interrupt(Arc<AtomicBool>);

impl Interrupt {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn trigger(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_set(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }

    /// Raises the flag from a background thread after `delay`.
    pub fn trigger_after(&self, delay: Duration) -> std::thread::JoinHandle<()> {
        let flag = self.clone();
        std::thread::spawn(move || {
            std::thread::sleep(delay);
            flag.trigger();
        })
    }
}

/// Position of an exit in the order [`run_anytime`] evaluates exits: by location, cheapest
/// first within a location, the final exit last.
pub fn execution_key(p: &ExitProfile) -> (usize, bool, FlopCount, ExitKind) {
    (p.location, p.arch == ExitKind::Final, p.cumulative_flops, p.arch)
}

/// Deepest exit, in execution order, whose cumulative FLOPs fit in `budget` (inclusive).
pub fn select_exit(profiles: &[ExitProfile], budget: FlopCount) -> Result<Option<&ExitProfile>> {
    if profiles.is_empty() {
        return Err(Error::EmptyProfiles);
    }
    Ok(profiles
        .iter()
        .filter(|p| p.cumulative_flops <= budget)
        .max_by_key(|p| execution_key(p)))
}

pub fn run_anytime(model: &MultiExitModel, input: &Tensor, policy: BudgetPolicy, interrupt: &Interrupt) -> Result<AnytimeResult> {
    run_anytime_with_hook(model, input, policy, interrupt, |_| {})
}

/// As [`run_anytime`], calling `hook` after each exit completes (before the next interrupt poll).
pub fn run_anytime_with_hook<H>(
    model: &MultiExitModel,
    input: &Tensor,
    policy: BudgetPolicy,
    interrupt: &Interrupt,
    mut hook: H,
) -> Result<AnytimeResult>
where
    H: FnMut(&ExitEvent),
{
    let budget = match policy {
        BudgetPolicy::Flops(b) => b,
        BudgetPolicy::Interrupt => FlopCount(u64::MAX),
    };
    let mut by_location: BTreeMap<usize, Vec<(FlopCount, BranchArchitecture, &ExitBranch)>> = BTreeMap::new();
    for (location, arch, branch) in model.branches() {
        let flops = exit_flops(model, ExitId::Branch(location, arch))?;
        by_location.entry(location).or_default().push((flops, arch, branch));
    }
    for exits in by_location.values_mut() {
        exits.sort_by_key(|&(flops, arch, _)| (flops, arch));
    }

    let mut cx = Ctx::eval(&model.store);
    let mut retained: Option<AnytimeResult> = None;
    let mut completed = 0;
    let mut x = None;
    let depth = model.depth();
    let mut finished_backbone = true;
    for b in 1..=depth {
        if interrupt.is_set() || backbone_flops(model, b)? > budget {
            finished_backbone = false;
            break;
        }
        let input_seq = match x {
            Some(v) => v,
            None => model.backbone.embed(&mut cx, input)?,
        };
        let seq = model.backbone.layer(&mut cx, b, input_seq)?;
        x = Some(seq);
        for &(flops, arch, branch) in by_location.get(&b).map(Vec::as_slice).unwrap_or(&[]) {
            if interrupt.is_set() {
                break;
            }
            let exit = ExitId::Branch(b, arch);
            if flops > budget {
                continue;
            }
            let out = branch.forward(&mut cx, seq)?;
            completed += 1;
            retained = Some(AnytimeResult {
                prediction: cx.tape.value(out).to_vec(),
                exit,
                location: b,
                flops,
                exits_evaluated: completed,
            });
            hook(&ExitEvent { exit, flops, completed });
        }
    }
    if finished_backbone && !interrupt.is_set() {
        let flops = final_flops(model)?;
        if flops <= budget {
            let seq = x.expect("depth is at least one");
            let out = model.backbone.head(&mut cx, seq)?;
            completed += 1;
            retained = Some(AnytimeResult {
                prediction: cx.tape.value(out).to_vec(),
                exit: ExitId::Final,
                location: depth,
                flops,
                exits_evaluated: completed,
            });
            hook(&ExitEvent {
                exit: ExitId::Final,
                flops,
                completed,
            });
        }
    }
    retained.ok_or(Error::NoExitCompleted { budget: budget.get() })
}

/// Converts wall-clock budgets into FLOP budgets using measured throughput.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WallClockAdapter {
    pub flops_per_second: f64,
}

impl WallClockAdapter {
    /// Times `repeats` full forward passes over `input`.
    pub fn calibrate(model: &MultiExitModel, input: &Tensor, repeats: usize) -> Result<Self> {
        let per_pass = final_flops(model)?.get() as f64 * input.shape()[0] as f64;
        let start = Instant::now();
        for _ in 0..repeats.max(1) {
            let mut cx = Ctx::eval(&model.store);
            model.forward(&mut cx, input)?;
        }
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        Ok(Self {
            flops_per_second: per_pass * repeats.max(1) as f64 / secs,
        })
    }

    pub fn budget_for(&self, time: Duration) -> FlopCount {
        FlopCount((self.flops_per_second * time.as_secs_f64()).floor() as u64)
    }
}
