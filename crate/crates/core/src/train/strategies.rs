use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::fit::{fit, FitReport, TrainConfig, Validation};
use super::model::{combined_loss, ExitId, MultiExitModel, TaskKind};
use crate::autodiff::nn::Ctx;
use crate::autodiff::{ParamId, ParamStore, Var};
use crate::branches::{BranchArchitecture, ExitBranch};
use crate::data::{LabeledImageSet, Targets};
use crate::error::{Error, Result};
use crate::vit::{PatchSequence, VisionTransformer};

/// Loss weights for end-to-end training: `final_weight · l + Σ branch_weight · l_b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub final_weight: f64,
    pub branch_weight: f64,
}

impl LossWeights {
    pub fn uniform() -> Self {
        Self {
            final_weight: 1.0,
            branch_weight: 1.0,
        }
    }

    /// The final exit counts double relative to every early exit; only the ratio matters.
    pub fn final_double() -> Self {
        Self {
            final_weight: 1.0,
            branch_weight: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TrainStrategy {
    ClassifierWise,
    EndToEnd(LossWeights),
    LayerWise,
}

impl TrainStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            TrainStrategy::ClassifierWise => "classifier-wise",
            TrainStrategy::EndToEnd(_) => "end-to-end",
            TrainStrategy::LayerWise => "layer-wise",
        }
    }
}

impl fmt::Display for TrainStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainStrategy {
    type Err = Error;

    /// End-to-end parses with uniform weights.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classifier-wise" => Ok(TrainStrategy::ClassifierWise),
            "end-to-end" => Ok(TrainStrategy::EndToEnd(LossWeights::uniform())),
            "layer-wise" => Ok(TrainStrategy::LayerWise),
            other => Err(Error::UnknownStrategy(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitScore {
    pub loss: f64,
    pub metric: f64,
}

impl From<ExitScore> for Validation {
    fn from(s: ExitScore) -> Self {
        Validation {
            loss: s.loss,
            metric: s.metric,
        }
    }
}

/// Inference-mode mean loss and metric of each output produced by `outputs`, over all samples.
fn score<F>(store: &ParamStore, task: TaskKind, targets: &Targets, batch: usize, mut outputs: F) -> Result<Vec<ExitScore>>
where
    F: FnMut(&mut Ctx, &[usize]) -> Result<Vec<Var>>,
{
    let n = targets.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let indices: Vec<usize> = (0..n).collect();
    let mut sums: Vec<(f64, f64)> = Vec::new();
    for chunk in indices.chunks(batch.max(1)) {
        let mut cx = Ctx::eval(store);
        let outs = outputs(&mut cx, chunk)?;
        let t = targets.select(chunk);
        sums.resize(outs.len(), (0.0, 0.0));
        for (s, &o) in sums.iter_mut().zip(&outs) {
            let loss = task.loss(&mut cx.tape, o, &t)?;
            s.0 += cx.tape.value(loss)[0] * chunk.len() as f64;
            s.1 += task.metric_sum(cx.tape.value(o), &t);
        }
    }
    Ok(sums
        .into_iter()
        .map(|(l, m)| ExitScore {
            loss: l / n as f64,
            metric: m / n as f64,
        })
        .collect())
}

fn score_final(store: &ParamStore, backbone: &VisionTransformer, task: TaskKind, set: &LabeledImageSet, batch: usize) -> Result<ExitScore> {
    let scores = score(store, task, &set.targets, batch, |cx, idx| {
        Ok(vec![backbone.forward(cx, &set.gather_images(idx))?])
    })?;
    Ok(scores[0])
}

fn score_branch_on_features(
    store: &ParamStore,
    branch: &ExitBranch,
    task: TaskKind,
    features: &PatchSequence,
    targets: &Targets,
    batch: usize,
) -> Result<ExitScore> {
    let scores = score(store, task, targets, batch, |cx, idx| {
        let x = cx.tape.constant(&features.gather(idx));
        Ok(vec![branch.forward(cx, x)?])
    })?;
    Ok(scores[0])
}

fn score_all(
    store: &ParamStore,
    backbone: &VisionTransformer,
    branches: &BTreeMap<(usize, BranchArchitecture), ExitBranch>,
    task: TaskKind,
    set: &LabeledImageSet,
    batch: usize,
) -> Result<BTreeMap<ExitId, ExitScore>> {
    let mut ids: Vec<ExitId> = branches.keys().map(|&(l, a)| ExitId::Branch(l, a)).collect();
    ids.push(ExitId::Final);
    let scores = score(store, task, &set.targets, batch, |cx, idx| {
        let collected = backbone.forward_collect(cx, &set.gather_images(idx))?;
        let mut outs = Vec::with_capacity(branches.len() + 1);
        for (&(location, _), branch) in branches {
            outs.push(branch.forward(cx, collected.sequences[location - 1])?);
        }
        outs.push(collected.logits);
        Ok(outs)
    })?;
    Ok(ids.into_iter().zip(scores).collect())
}

/// Final-exit loss and metric on `set`.
pub fn evaluate_final(model: &MultiExitModel, set: &LabeledImageSet, batch: usize) -> Result<ExitScore> {
    score_final(&model.store, &model.backbone, model.task, set, batch)
}

/// Loss and metric of every exit on `set`, from one backbone pass per batch.
pub fn evaluate_exits(model: &MultiExitModel, set: &LabeledImageSet, batch: usize) -> Result<BTreeMap<ExitId, ExitScore>> {
    score_all(&model.store, &model.backbone, &model.branches, model.task, set, batch)
}

/// Scores one branch on precomputed P^b for every sample of a set.
pub fn evaluate_branch_on_features(
    model: &MultiExitModel,
    location: usize,
    arch: BranchArchitecture,
    features: &PatchSequence,
    targets: &Targets,
    batch: usize,
) -> Result<ExitScore> {
    let branch = model.branch(location, arch)?;
    score_branch_on_features(&model.store, branch, model.task, features, targets, batch)
}

/// Minimises the final-exit task loss over the backbone parameters.
pub fn train_backbone(
    model: &mut MultiExitModel,
    train: &LabeledImageSet,
    val: &LabeledImageSet,
    config: &TrainConfig,
) -> Result<FitReport> {
    let trainable = model.backbone.params();
    let MultiExitModel { store, backbone, task, .. } = model;
    let (backbone, task) = (&*backbone, *task);
    let report = fit(
        store,
        &trainable,
        train.len(),
        config,
        |cx, idx| {
            let out = backbone.forward(cx, &train.gather_images(idx))?;
            task.loss(&mut cx.tape, out, &train.targets.select(idx))
        },
        |store| Ok(score_final(store, backbone, task, val, config.batch_size.max(100))?.into()),
    )?;
    model.backbone_trained = true;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchReport {
    pub location: usize,
    pub arch: BranchArchitecture,
    pub fit: FitReport,
}

/// Trains each selected branch on its own loss against the frozen backbone. Backbone features
/// are computed once in inference mode and shared by every branch at the same location.
/// `selection: None` trains every attached branch.
pub fn train_classifier_wise(
    model: &mut MultiExitModel,
    train: &LabeledImageSet,
    val: &LabeledImageSet,
    config: &TrainConfig,
    selection: Option<&[(usize, BranchArchitecture)]>,
) -> Result<Vec<BranchReport>> {
    if !model.backbone_trained {
        log::warn!("classifier-wise training on a backbone that has not been trained");
    }
    let keys: Vec<(usize, BranchArchitecture)> = match selection {
        Some(keys) => keys.to_vec(),
        None => model.branch_keys(),
    };
    for &(location, arch) in &keys {
        model.branch(location, arch)?;
    }
    let eval_batch = config.batch_size.max(100);
    let train_features = model.collect_features(train, eval_batch)?;
    let val_features = model.collect_features(val, eval_batch)?;

    let MultiExitModel { store, branches, task, .. } = model;
    let task = *task;
    let mut reports = Vec::with_capacity(keys.len());
    for (location, arch) in keys {
        let branch = &branches[&(location, arch)];
        let trainable = branch.params();
        let (tf, vf) = (&train_features[location - 1], &val_features[location - 1]);
        let branch_config = TrainConfig {
            seed: branch_seed(config.seed, location, arch),
            ..config.clone()
        };
        log::info!("classifier-wise: training {arch} at location {location}");
        let fit = fit(
            store,
            &trainable,
            train.len(),
            &branch_config,
            |cx, idx| {
                let x = cx.tape.constant(&tf.gather(idx));
                let out = branch.forward(cx, x)?;
                task.loss(&mut cx.tape, out, &train.targets.select(idx))
            },
            |store| Ok(score_branch_on_features(store, branch, task, vf, &val.targets, eval_batch)?.into()),
        )?;
        reports.push(BranchReport { location, arch, fit });
    }
    Ok(reports)
}

fn branch_seed(seed: u64, location: usize, arch: BranchArchitecture) -> u64 {
    let arch_index = BranchArchitecture::ALL.iter().position(|&a| a == arch).unwrap() as u64;
    seed ^ ((location as u64) << 32 | (arch_index + 1) << 16)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EndToEndReport {
    pub fit: FitReport,
    /// Validation score of every exit after the best epoch has been restored.
    pub exit_scores: BTreeMap<ExitId, ExitScore>,
}

/// Mean combined loss of one batch with every exit attached.
pub fn end_to_end_loss(model: &MultiExitModel, cx: &mut Ctx, set: &LabeledImageSet, indices: &[usize], weights: LossWeights) -> Result<Var> {
    e2e_loss(&model.backbone, &model.branches, model.task, cx, set, indices, weights)
}

fn e2e_loss(
    backbone: &VisionTransformer,
    branches: &BTreeMap<(usize, BranchArchitecture), ExitBranch>,
    task: TaskKind,
    cx: &mut Ctx,
    set: &LabeledImageSet,
    indices: &[usize],
    weights: LossWeights,
) -> Result<Var> {
    let targets = set.targets.select(indices);
    let collected = backbone.forward_collect(cx, &set.gather_images(indices))?;
    let final_loss = task.loss(&mut cx.tape, collected.logits, &targets)?;
    let mut branch_losses = Vec::with_capacity(branches.len());
    for (&(location, _), branch) in branches {
        let out = branch.forward(cx, collected.sequences[location - 1])?;
        branch_losses.push((task.loss(&mut cx.tape, out, &targets)?, weights.branch_weight));
    }
    combined_loss(&mut cx.tape, final_loss, weights.final_weight, &branch_losses)
}

/// Trains the backbone and every attached branch jointly on the weighted sum of their losses.
pub fn train_end_to_end(
    model: &mut MultiExitModel,
    train: &LabeledImageSet,
    val: &LabeledImageSet,
    config: &TrainConfig,
    weights: LossWeights,
) -> Result<EndToEndReport> {
    let mut trainable = model.backbone.params();
    trainable.extend(model.branch_params());
    let eval_batch = config.batch_size.max(100);
    let MultiExitModel {
        store,
        backbone,
        branches,
        task,
        ..
    } = model;
    let (backbone, branches, task) = (&*backbone, &*branches, *task);
    let fit = fit(
        store,
        &trainable,
        train.len(),
        config,
        |cx, idx| e2e_loss(backbone, branches, task, cx, train, idx, weights),
        |store| {
            let scores = score_all(store, backbone, branches, task, val, eval_batch)?;
            let mut loss = 0.0;
            for (id, s) in &scores {
                let w = if *id == ExitId::Final {
                    weights.final_weight
                } else {
                    weights.branch_weight
                };
                loss += w * s.loss;
            }
            Ok(Validation {
                loss,
                metric: scores[&ExitId::Final].metric,
            })
        },
    )?;
    let exit_scores = score_all(store, backbone, branches, task, val, eval_batch)?;
    model.backbone_trained = true;
    Ok(EndToEndReport { fit, exit_scores })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    /// 1-based stage index; the last stage trains the final head.
    pub stage: usize,
    /// Encoder layers trained in this stage, 1-based and inclusive; empty when none.
    pub layers: std::ops::RangeInclusive<usize>,
    pub exit: ExitId,
    pub fit: FitReport,
    pub val: ExitScore,
}

/// Progressive training: stage k trains layers `(b_{k-1}, b_k]` plus the branch at `b_k` with
/// every earlier layer frozen; a last stage trains the remaining layers and the final head.
/// `exits` lists one branch per stage with strictly ascending locations.
pub fn train_layer_wise(
    model: &mut MultiExitModel,
    train: &LabeledImageSet,
    val: &LabeledImageSet,
    config: &TrainConfig,
    exits: &[(usize, BranchArchitecture)],
) -> Result<Vec<StageReport>> {
    train_layer_wise_with(model, train, val, config, exits, |_, _| {})
}

/// As [`train_layer_wise`], handing each finished stage and the model after it to `on_stage`.
pub fn train_layer_wise_with<F>(
    model: &mut MultiExitModel,
    train: &LabeledImageSet,
    val: &LabeledImageSet,
    config: &TrainConfig,
    exits: &[(usize, BranchArchitecture)],
    mut on_stage: F,
) -> Result<Vec<StageReport>>
where
    F: FnMut(&StageReport, &MultiExitModel),
{
    let depth = model.depth();
    let locations: Vec<usize> = exits.iter().map(|e| e.0).collect();
    if locations.windows(2).any(|w| w[0] >= w[1]) || locations.iter().any(|&l| l == 0 || l > depth) {
        return Err(Error::UnsortedLocations { locations, depth });
    }
    for &(location, arch) in exits {
        model.branch(location, arch)?;
    }
    let eval_batch = config.batch_size.max(100);
    let mut reports = Vec::with_capacity(exits.len() + 1);
    let mut done = 0;
    for (stage, exit) in exits.iter().map(|&(l, a)| Some((l, a))).chain([None]).enumerate() {
        let end = exit.map_or(depth, |(l, _)| l);
        let mut trainable: Vec<ParamId> = if done == 0 {
            model.backbone.embed.params()
        } else {
            Vec::new()
        };
        for b in done + 1..=end {
            trainable.extend(model.backbone.layer_params(b));
        }
        let stage_config = TrainConfig {
            seed: config.seed.wrapping_add(stage as u64),
            ..config.clone()
        };
        let MultiExitModel {
            store,
            backbone,
            branches,
            task,
            ..
        } = &mut *model;
        let (backbone, task) = (&*backbone, *task);
        let (fit, val_score, exit_id) = match exit {
            Some((location, arch)) => {
                let branch = &branches[&(location, arch)];
                trainable.extend(branch.params());
                let forward = |cx: &mut Ctx, set: &LabeledImageSet, idx: &[usize]| -> Result<Var> {
                    let mut x = backbone.embed(cx, &set.gather_images(idx))?;
                    for b in 1..=location {
                        x = backbone.layer(cx, b, x)?;
                    }
                    branch.forward(cx, x)
                };
                let fit = fit(
                    store,
                    &trainable,
                    train.len(),
                    &stage_config,
                    |cx, idx| {
                        let out = forward(cx, train, idx)?;
                        task.loss(&mut cx.tape, out, &train.targets.select(idx))
                    },
                    |store| Ok(score(store, task, &val.targets, eval_batch, |cx, idx| Ok(vec![forward(cx, val, idx)?]))?[0].into()),
                )?;
                let val_score = score(store, task, &val.targets, eval_batch, |cx, idx| Ok(vec![forward(cx, val, idx)?]))?[0];
                (fit, val_score, ExitId::Branch(location, arch))
            }
            None => {
                trainable.extend(backbone.head_params());
                let fit = fit(
                    store,
                    &trainable,
                    train.len(),
                    &stage_config,
                    |cx, idx| {
                        let out = backbone.forward(cx, &train.gather_images(idx))?;
                        task.loss(&mut cx.tape, out, &train.targets.select(idx))
                    },
                    |store| Ok(score_final(store, backbone, task, val, eval_batch)?.into()),
                )?;
                let val_score = score_final(store, backbone, task, val, eval_batch)?;
                (fit, val_score, ExitId::Final)
            }
        };
        log::info!("layer-wise stage {}: layers {}..={end}, val metric {:.4}", stage + 1, done + 1, val_score.metric);
        reports.push(StageReport {
            stage: stage + 1,
            layers: done + 1..=end,
            exit: exit_id,
            fit,
            val: val_score,
        });
        on_stage(reports.last().expect("just pushed"), model);
        done = end;
    }
    model.backbone_trained = true;
    Ok(reports)
}
