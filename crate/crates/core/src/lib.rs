//! Multi-exit Vision Transformers.
//!
//! A ViT backbone that can carry early-exit branches of seven architectures after any encoder
//! layer, three strategies to train them, exact FLOP accounting for every exit, and an anytime
//! runtime that answers with the deepest exit completed within a compute budget.

pub mod autodiff;
pub mod anytime;
pub mod branches;
pub mod data;
pub mod error;
pub mod profile;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
