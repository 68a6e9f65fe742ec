//! Optimization: Adam, the learning-rate schedule and the training loop.

pub mod adam;
pub mod schedule;
pub mod trainer;

pub use adam::{AdamConfig, AdamState};
pub use schedule::Schedule;
pub use trainer::{StepRecord, Trainer, Validation};
