//! The optimisation loop shared by every strategy: shuffled mini-batches, Adam, validation
//! after each epoch, reduce-on-plateau, early stopping and best-epoch restoration.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::Ctx;
use crate::autodiff::{seeded_rng, Adam, AdamConfig, ParamId, ParamStore, Scheduler, SchedulerConfig, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub scheduler: SchedulerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            max_epochs: 30,
            batch_size: 64,
            seed: 0,
            adam: AdamConfig::default(),
            scheduler: SchedulerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_val_metric: f64,
    pub stopped_early: bool,
}

/// Validation outcome for one epoch: loss drives the scheduler, the metric is reported.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Validation {
    pub loss: f64,
    pub metric: f64,
}

/// Trains exactly `trainable` (everything else is frozen for the duration) on `samples`
/// indices. `batch_loss` builds the mean loss of one mini-batch on the given context;
/// `validate` scores the current parameters. Trainability flags are restored afterwards.
pub fn fit<L, V>(
    store: &mut ParamStore,
    trainable: &[ParamId],
    samples: usize,
    config: &TrainConfig,
    mut batch_loss: L,
    mut validate: V,
) -> Result<FitReport>
where
    L: FnMut(&mut Ctx, &[usize]) -> Result<Var>,
    V: FnMut(&ParamStore) -> Result<Validation>,
{
    if samples == 0 {
        return Err(Error::EmptyDataset);
    }
    if config.batch_size == 0 || config.max_epochs == 0 {
        return Err(Error::InvalidConfig("batch size and epoch count must be positive".into()));
    }
    let flags: Vec<bool> = store.ids().map(|id| store.get(id).requires_grad()).collect();
    store.freeze_all();
    store.set_trainable(trainable.iter().copied(), true);

    let result = run(store, trainable, samples, config, &mut batch_loss, &mut validate);

    for (id, on) in store.ids().collect::<Vec<_>>().into_iter().zip(flags) {
        store.get_mut(id).set_requires_grad(on);
    }
    result
}

fn run<L, V>(
    store: &mut ParamStore,
    trainable: &[ParamId],
    samples: usize,
    config: &TrainConfig,
    batch_loss: &mut L,
    validate: &mut V,
) -> Result<FitReport>
where
    L: FnMut(&mut Ctx, &[usize]) -> Result<Var>,
    V: FnMut(&ParamStore) -> Result<Validation>,
{
    let adam_config = AdamConfig {
        lr: config.lr,
        ..config.adam
    };
    let mut adam = Adam::new(adam_config, store, trainable.to_vec());
    let mut scheduler = Scheduler::new(config.scheduler, config.lr);
    let mut rng = seeded_rng(config.seed);
    let mut order: Vec<usize> = (0..samples).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, Validation, Vec<f64>)> = None;
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            store.zero_grad();
            let (tape, loss) = {
                let mut cx = Ctx::train(store, &mut rng);
                let loss = batch_loss(&mut cx, chunk)?;
                (cx.into_tape(), loss)
            };
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    what: "training loss",
                    value,
                });
            }
            loss_sum += value * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            tape.accumulate_param_grads(&grads, store);
            adam.step(store);
        }
        let train_loss = loss_sum / samples as f64;
        let val = validate(store)?;
        let decision = scheduler.step(val.loss)?;
        log::info!(
            "epoch {epoch}: train loss {train_loss:.5}, val loss {:.5}, val metric {:.4}, lr {:.2e}",
            val.loss,
            val.metric,
            adam.lr()
        );
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: val.loss,
            val_metric: val.metric,
            lr: adam.lr(),
        });
        if decision.improved {
            best = Some((epoch, val, store.flat_values(trainable.iter().copied())));
        }
        adam.set_lr(decision.lr);
        if decision.stop {
            stopped_early = true;
            break;
        }
    }
    let (best_epoch, best_val, values) = best.expect("the first finite validation loss is always an improvement");
    store.set_flat_values(trainable.iter().copied(), &values)?;
    store.zero_grad();
    Ok(FitReport {
        epochs,
        best_epoch,
        best_val_loss: best_val.loss,
        best_val_metric: best_val.metric,
        stopped_early,
    })
}
