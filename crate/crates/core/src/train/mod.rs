//! Multi-exit models and the classifier-wise, end-to-end and layer-wise training strategies.

mod fit;
mod model;
mod strategies;

pub use fit::{fit, EpochRecord, FitReport, TrainConfig, Validation};
pub use model::{argmax, combined_loss, ExitId, MetricKind, MultiExitModel, TaskKind};
pub use strategies::{
    end_to_end_loss, evaluate_branch_on_features, evaluate_exits, evaluate_final, train_backbone, train_classifier_wise,
    train_end_to_end, train_layer_wise, train_layer_wise_with, BranchReport, EndToEndReport, ExitScore, LossWeights, StageReport, TrainStrategy,
};
