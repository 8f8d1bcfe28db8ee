//! Adam with bias correction, plus the reduce-on-plateau / early-stopping schedule.

use serde::{Deserialize, Serialize};

use super::tensor::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for a fixed set of parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    params: Vec<ParamId>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore, params: Vec<ParamId>) -> Self {
        let first = params.iter().map(|&id| vec![0.0; store.get(id).len()]).collect::<Vec<_>>();
        let second = first.clone();
        Self {
            config,
            params,
            first,
            second,
            step: 0,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One bias-corrected update from the gradients accumulated in `store`. Parameters without
    /// a gradient accumulator (frozen) are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((&id, m), v) in self.params.iter().zip(&mut self.first).zip(&mut self.second) {
            let tensor = store.get_mut(id);
            let Some(grad) = tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            for (((w, g), m), v) in tensor.values_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Epochs without improvement tolerated before the learning rate is cut.
    pub plateau_patience: u32,
    pub factor: f64,
    /// Epochs without improvement tolerated before training stops.
    pub stop_patience: u32,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            plateau_patience: 2,
            factor: 0.6,
            stop_patience: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleDecision {
    pub lr: f64,
    pub reduced: bool,
    pub improved: bool,
    pub stop: bool,
}

/// Tracks a lower-is-better validation metric across epochs.
///
/// The plateau counter resets after every cut; the stop counter only resets on a strict
/// improvement.
#[derive(Clone, Debug)]
pub struct Scheduler {
    pub config: SchedulerConfig,
    best: f64,
    since_improvement: u32,
    plateau_epochs: u32,
    lr: f64,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig, lr: f64) -> Self {
        Self {
            config,
            best: f64::INFINITY,
            since_improvement: 0,
            plateau_epochs: 0,
            lr,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn epochs_since_improvement(&self) -> u32 {
        self.since_improvement
    }

    pub fn step(&mut self, metric: f64) -> Result<ScheduleDecision> {
        if !metric.is_finite() {
            return Err(Error::NonFinite {
                what: "scheduler metric",
                value: metric,
            });
        }
        let improved = metric < self.best;
        let mut reduced = false;
        if improved {
            self.best = metric;
            self.since_improvement = 0;
            self.plateau_epochs = 0;
        } else {
            self.since_improvement += 1;
            self.plateau_epochs += 1;
            // No cut on the epoch that ends training.
            if self.plateau_epochs > self.config.plateau_patience && self.since_improvement <= self.config.stop_patience {
                self.lr *= self.config.factor;
                self.plateau_epochs = 0;
                reduced = true;
            }
        }
        Ok(ScheduleDecision {
            lr: self.lr,
            reduced,
            improved,
            stop: self.since_improvement > self.config.stop_patience,
        })
    }
}
