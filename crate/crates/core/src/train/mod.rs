//! Optimization: schedule, AdamW, checkpoints, training loops and gradient
//! checks.

pub mod checkpoint;
pub mod gradcheck;
pub mod loops;
pub mod optim;
pub mod schedule;

pub use checkpoint::Checkpoint;
pub use optim::{AdamW, AdamWConfig, OptimizerState};
pub use schedule::{lr_at, lr_at_time, ScheduleConfig};
