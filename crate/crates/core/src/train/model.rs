use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::nn::Ctx;
use crate::autodiff::{seeded_rng, ParamId, ParamStore, Tape, Tensor, Var};
use crate::branches::{BranchArchitecture, BranchConfig, ExitBranch};
use crate::data::{LabeledImageSet, Targets};
use crate::error::{Error, Result};
use crate::vit::{PatchSequence, ViTConfig, VisionTransformer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Classification { classes: usize },
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Accuracy,
    Mae,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Mae => "mae",
        }
    }

    pub fn higher_is_better(self) -> bool {
        self == MetricKind::Accuracy
    }

    /// Whether `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        if self.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }
}

impl TaskKind {
    pub fn outputs(self) -> usize {
        match self {
            TaskKind::Classification { classes } => classes,
            TaskKind::Regression => 1,
        }
    }

    pub fn metric_kind(self) -> MetricKind {
        match self {
            TaskKind::Classification { .. } => MetricKind::Accuracy,
            TaskKind::Regression => MetricKind::Mae,
        }
    }

    /// Cross-entropy for classification, mean absolute error for regression.
    pub fn loss(self, tape: &mut Tape, outputs: Var, targets: &Targets) -> Result<Var> {
        match (self, targets) {
            (TaskKind::Classification { .. }, Targets::Classes { labels, .. }) => tape.cross_entropy(outputs, labels),
            (TaskKind::Regression, Targets::Counts(counts)) => {
                let target = tape.constant_from(vec![counts.len(), 1], counts.clone())?;
                tape.l1_loss(outputs, target)
            }
            _ => Err(Error::InvalidConfig("targets do not match the task kind".into())),
        }
    }

    /// Sum over the batch of per-sample correctness (classification) or absolute error.
    pub fn metric_sum(self, outputs: &[f64], targets: &Targets) -> f64 {
        match targets {
            Targets::Classes { labels, .. } => {
                let k = outputs.len() / labels.len();
                outputs
                    .chunks(k)
                    .zip(labels)
                    .filter(|(row, &label)| argmax(row) == label)
                    .count() as f64
            }
            Targets::Counts(counts) => outputs.iter().zip(counts).map(|(p, t)| (p - t).abs()).sum(),
        }
    }
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// An exit of a multi-exit model: a branch at `(location, architecture)` or the final head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExitId {
    Branch(usize, BranchArchitecture),
    Final,
}

/// A ViT backbone plus branches keyed by (location, architecture), sharing one parameter store.
#[derive(Clone, Debug)]
pub struct MultiExitModel {
    pub store: ParamStore,
    pub backbone: VisionTransformer,
    pub branch_config: BranchConfig,
    pub task: TaskKind,
    pub seed: u64,
    /// Set once any strategy has trained the backbone; classifier-wise training warns otherwise.
    pub backbone_trained: bool,
    pub(crate) branches: BTreeMap<(usize, BranchArchitecture), ExitBranch>,
}

impl MultiExitModel {
    pub fn new(config: ViTConfig, task: TaskKind, seed: u64) -> Result<Self> {
        if config.outputs != task.outputs() {
            return Err(Error::InvalidConfig(format!(
                "backbone has {} outputs but the task needs {}",
                config.outputs,
                task.outputs()
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let branch_config = BranchConfig::for_backbone(&config);
        let backbone = VisionTransformer::new(&mut store, "backbone", config, &mut rng)?;
        Ok(Self {
            store,
            backbone,
            branch_config,
            task,
            seed,
            backbone_trained: false,
            branches: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.backbone.config
    }

    pub fn depth(&self) -> usize {
        self.backbone.depth()
    }

    pub fn check_location(&self, location: usize) -> Result<()> {
        if location == 0 || location > self.depth() {
            return Err(Error::LocationOutOfRange {
                location,
                depth: self.depth(),
            });
        }
        Ok(())
    }

    /// Attaches a freshly initialised branch. Its initial weights depend only on the model seed,
    /// the location and the architecture, not on which other branches exist.
    pub fn add_branch(&mut self, location: usize, arch: BranchArchitecture) -> Result<()> {
        self.check_location(location)?;
        if self.branches.contains_key(&(location, arch)) {
            return Ok(());
        }
        let arch_index = BranchArchitecture::ALL.iter().position(|&a| a == arch).unwrap() as u64;
        let seed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(1 + location as u64 * 16 + arch_index);
        let mut rng = seeded_rng(seed);
        let name = format!("exit.{location}.{}", arch.name());
        let branch = ExitBranch::new(&mut self.store, &name, arch, &self.branch_config, &mut rng)?;
        self.branches.insert((location, arch), branch);
        Ok(())
    }

    /// Every architecture at every location.
    pub fn add_branch_zoo(&mut self) -> Result<()> {
        for location in 1..=self.depth() {
            for arch in BranchArchitecture::ALL {
                self.add_branch(location, arch)?;
            }
        }
        Ok(())
    }

    pub fn branch(&self, location: usize, arch: BranchArchitecture) -> Result<&ExitBranch> {
        self.branches.get(&(location, arch)).ok_or_else(|| Error::MissingBranch {
            arch: arch.name().to_string(),
            location,
        })
    }

    /// Attached branches ordered by location, then architecture.
    pub fn branches(&self) -> impl Iterator<Item = (usize, BranchArchitecture, &ExitBranch)> {
        self.branches.iter().map(|(&(l, a), b)| (l, a, b))
    }

    pub fn branch_keys(&self) -> Vec<(usize, BranchArchitecture)> {
        self.branches.keys().copied().collect()
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn exits(&self) -> Vec<ExitId> {
        let mut ids: Vec<ExitId> = self.branches.keys().map(|&(l, a)| ExitId::Branch(l, a)).collect();
        ids.push(ExitId::Final);
        ids
    }

    pub fn backbone_params(&self) -> Vec<ParamId> {
        self.backbone.params()
    }

    pub fn branch_params(&self) -> Vec<ParamId> {
        self.branches.values().flat_map(|b| b.params()).collect()
    }

    /// Final-exit outputs for `images`.
    pub fn forward(&self, cx: &mut Ctx, images: &Tensor) -> Result<Var> {
        self.backbone.forward(cx, images)
    }

    /// Outputs of every exit, computed after the full backbone pass so that dropout draws in the
    /// backbone do not depend on which branches are attached.
    pub fn forward_all(&self, cx: &mut Ctx, images: &Tensor) -> Result<BTreeMap<ExitId, Var>> {
        let collected = self.backbone.forward_collect(cx, images)?;
        let mut out = BTreeMap::new();
        for (&(location, arch), branch) in &self.branches {
            let y = branch.forward(cx, collected.sequences[location - 1])?;
            out.insert(ExitId::Branch(location, arch), y);
        }
        out.insert(ExitId::Final, collected.logits);
        Ok(out)
    }

    /// Inference-mode P^1..P^L for a whole set, computed in batches.
    pub fn collect_features(&self, set: &LabeledImageSet, batch: usize) -> Result<Vec<PatchSequence>> {
        let n = set.len();
        let (t, d) = (self.config().tokens(), self.config().dim);
        let mut per_layer: Vec<Vec<f64>> = vec![Vec::with_capacity(n * t * d); self.depth()];
        let indices: Vec<usize> = (0..n).collect();
        for chunk in indices.chunks(batch.max(1)) {
            let images = set.gather_images(chunk);
            let mut cx = Ctx::eval(&self.store);
            let collected = self.backbone.forward_collect(&mut cx, &images)?;
            for (dst, &v) in per_layer.iter_mut().zip(&collected.sequences) {
                dst.extend_from_slice(cx.tape.value(v));
            }
        }
        per_layer
            .into_iter()
            .map(|values| PatchSequence::new(Tensor::new(vec![n, t, d], values)?))
            .collect()
    }
}

/// `final_weight · l + Σ λ_b · l_b`.
pub fn combined_loss(tape: &mut Tape, final_loss: Var, final_weight: f64, branch_losses: &[(Var, f64)]) -> Result<Var> {
    for &w in std::iter::once(&final_weight).chain(branch_losses.iter().map(|(_, w)| w)) {
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::InvalidConfig(format!("loss weight {w} must be finite and nonnegative")));
        }
    }
    let mut total = tape.scale(final_loss, final_weight);
    for &(loss, weight) in branch_losses {
        let weighted = tape.scale(loss, weight);
        total = tape.add(total, weighted)?;
    }
    Ok(total)
}
