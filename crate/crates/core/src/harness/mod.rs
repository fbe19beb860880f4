//! Experiment orchestration: configuration, training loops with resumable
//! checkpoints, evaluation, inference on detection files and the
//! occlusion-sensitivity sweep.

pub mod commands;
pub mod config;
pub mod eval;
pub mod infer;
pub mod sweep;
pub mod train;

pub use config::{DataConfig, EvalConfig, ExperimentConfig, LiftingOptions, LrSchedule, TrainConfig};
pub use eval::{eval_masks, evaluate, evaluate_prior, EvalReport};
pub use infer::{infer, Inference};
pub use sweep::{sweep, SweepRow};
pub use train::{Checkpoint, Position, Stage, StepLog, Trainer};
