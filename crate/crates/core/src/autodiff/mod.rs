//! Tensors, the differentiation tape, the neural operators built on it, and the optimizer.

pub mod kernels;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use nn::{global_avg_pool, AffineParams, Ctx, LayerNormParams, Linear};
pub use optim::{Adam, AdamConfig, ScheduleDecision, Scheduler, SchedulerConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};

/// Seeded generator used for initialisation, shuffling and dropout masks.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
