//! Per-exit accuracy / cost profiles and the practical-branch rule.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::flops::{total_flops, FlopCount};
use crate::autodiff::{seeded_rng, ParamStore};
use crate::branches::{BranchArchitecture, ExitBranch};
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::train::{evaluate_exits, ExitId, MetricKind, MultiExitModel};

/// The `arch` column of a profile: a branch architecture or the backbone's own head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ExitKind {
    Branch(BranchArchitecture),
    Final,
}

impl fmt::Display for ExitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExitKind::Branch(a) => f.write_str(a.name()),
            ExitKind::Final => f.write_str("final"),
        }
    }
}

impl FromStr for ExitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "final" {
            Ok(ExitKind::Final)
        } else {
            s.parse().map(ExitKind::Branch)
        }
    }
}

impl TryFrom<String> for ExitKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ExitKind> for String {
    fn from(k: ExitKind) -> String {
        k.to_string()
    }
}

/// One row of an exit profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitProfile {
    pub location: usize,
    pub arch: ExitKind,
    pub metric_kind: MetricKind,
    pub metric_value: f64,
    pub cumulative_flops: FlopCount,
    pub practical: bool,
}

impl ExitProfile {
    pub fn exit_id(&self) -> ExitId {
        match self.arch {
            ExitKind::Branch(a) => ExitId::Branch(self.location, a),
            ExitKind::Final => ExitId::Final,
        }
    }
}

/// Which earlier exits a branch must beat to be practical.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PracticalMode {
    /// Every exit at a strictly earlier location, whatever its architecture.
    #[default]
    AcrossArchitectures,
    /// Only earlier exits of the same architecture; the final exit is compared against all.
    PerArchitecture,
}

/// Single-sample FLOPs of a branch; independent of where it is attached.
pub fn branch_flops(model: &MultiExitModel, arch: BranchArchitecture) -> Result<FlopCount> {
    let ops = match model.branches().find(|(_, a, _)| *a == arch) {
        Some((_, _, branch)) => branch.descriptors(1)?,
        None => {
            let mut scratch = ParamStore::new();
            ExitBranch::new(&mut scratch, "scratch", arch, &model.branch_config, &mut seeded_rng(0))?.descriptors(1)?
        }
    };
    Ok(total_flops(&ops))
}

/// FLOPs of the patch embedding plus encoder layers `1..=location`, for one sample.
pub fn backbone_flops(model: &MultiExitModel, location: usize) -> Result<FlopCount> {
    model.check_location(location)?;
    let embed = total_flops(&model.backbone.embed_descriptors(1));
    let layer = total_flops(&model.backbone.layer_descriptors(1));
    Ok(embed + FlopCount(layer.get() * location as u64))
}

/// Total single-sample FLOPs from the input through the branch `arch` at `location`.
pub fn cumulative_flops(model: &MultiExitModel, location: usize, arch: BranchArchitecture) -> Result<FlopCount> {
    Ok(backbone_flops(model, location)? + branch_flops(model, arch)?)
}

/// Single-sample FLOPs of the complete backbone including its classification head.
pub fn final_flops(model: &MultiExitModel) -> Result<FlopCount> {
    Ok(backbone_flops(model, model.depth())? + total_flops(&model.backbone.head_descriptors(1)))
}

pub fn exit_flops(model: &MultiExitModel, exit: ExitId) -> Result<FlopCount> {
    match exit {
        ExitId::Branch(location, arch) => cumulative_flops(model, location, arch),
        ExitId::Final => final_flops(model),
    }
}

/// Profiles of every attached branch plus the final exit, practical flags set across
/// architectures. Rows are ordered by location, then architecture, final last.
pub fn profile_exits(model: &MultiExitModel, set: &LabeledImageSet, batch: usize) -> Result<Vec<ExitProfile>> {
    let scores = evaluate_exits(model, set, batch)?;
    let kind = model.task.metric_kind();
    let mut profiles = Vec::with_capacity(scores.len());
    for (exit, score) in scores {
        let (location, arch) = match exit {
            ExitId::Branch(l, a) => (l, ExitKind::Branch(a)),
            ExitId::Final => (model.depth(), ExitKind::Final),
        };
        profiles.push(ExitProfile {
            location,
            arch,
            metric_kind: kind,
            metric_value: score.metric,
            cumulative_flops: exit_flops(model, exit)?,
            practical: false,
        });
    }
    mark_practical(&mut profiles, PracticalMode::default())?;
    Ok(profiles)
}

/// [`profile_exits`] for a model that must carry all seven architectures at every location.
pub fn profile_all_exits(model: &MultiExitModel, set: &LabeledImageSet, batch: usize) -> Result<Vec<ExitProfile>> {
    for location in 1..=model.depth() {
        for arch in BranchArchitecture::ALL {
            model.branch(location, arch)?;
        }
    }
    profile_exits(model, set, batch)
}

/// Sets `practical` on every profile: true iff its metric is strictly better than that of every
/// profile at a strictly earlier location (restricted to the same family in per-architecture
/// mode). Exits with no earlier competitor are practical.
pub fn mark_practical(profiles: &mut [ExitProfile], mode: PracticalMode) -> Result<()> {
    let Some(first) = profiles.first() else {
        return Ok(());
    };
    let kind = first.metric_kind;
    if profiles.iter().any(|p| p.metric_kind != kind) {
        return Err(Error::MixedMetrics);
    }
    let family = |p: &ExitProfile| match (mode, p.arch) {
        (PracticalMode::PerArchitecture, ExitKind::Branch(a)) => Some(a),
        _ => None,
    };
    // Best metric per (family, location), then a running best over earlier locations.
    let mut best_at: BTreeMap<(Option<BranchArchitecture>, usize), f64> = BTreeMap::new();
    for p in profiles.iter().filter(|p| p.arch != ExitKind::Final) {
        let keys = match family(p) {
            Some(a) => vec![(Some(a), p.location), (None, p.location)],
            None => vec![(None, p.location)],
        };
        for key in keys {
            let entry = best_at.entry(key).or_insert(p.metric_value);
            if kind.better(p.metric_value, *entry) {
                *entry = p.metric_value;
            }
        }
    }
    let best_before = |fam: Option<BranchArchitecture>, location: usize| -> Option<f64> {
        best_at
            .range((fam, 0)..(fam, location))
            .map(|(_, &v)| v)
            .reduce(|a, b| if kind.better(b, a) { b } else { a })
    };
    for p in profiles.iter_mut() {
        p.practical = match best_before(family(p), p.location) {
            None => true,
            Some(best) => kind.better(p.metric_value, best),
        };
    }
    Ok(())
}
