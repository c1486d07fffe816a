//! Objective, optimizer and training loop.

pub mod adam;
pub mod config;
pub mod loss;
pub mod trainer;

pub use adam::AdamState;
pub use config::{AdamParams, TrainConfig};
pub use trainer::{train, EpochRecord, History, StopReason};
