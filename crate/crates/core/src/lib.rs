//! Self-distillation fine-tuning (SDFT) at desk scale.
//!
//! A policy learns from demonstrations by distilling, on its own samples, a
//! copy of itself that sees the demonstration in context. The crate contains
//! the policy families, the reverse-KL gradient estimators with exact
//! enumeration oracles, the training loop and its baselines, synthetic
//! in-context-learning tasks, and evaluation metrics.

pub mod error;
pub mod estimators;
pub mod exec;
pub mod fixture;
pub mod optim;
pub mod grad;
pub mod metrics;
pub mod policy;
pub mod rng;
pub mod tasks;
pub mod baselines;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
pub use grad::GradientVector;
