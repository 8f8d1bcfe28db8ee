//! FLOP accounting and exit profiling.

pub mod exits;
pub mod flops;

pub use exits::{
    backbone_flops, branch_flops, cumulative_flops, exit_flops, final_flops, mark_practical, profile_all_exits,
    profile_exits, ExitKind, ExitProfile, PracticalMode,
};
pub use flops::{flops_of, total_flops, ElementwiseKind, FlopCount, OpDescriptor};
