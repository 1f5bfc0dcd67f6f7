//! Training, checkpoints, evaluation, attention export and the gradient
//! suite.

mod checkpoint;
mod config;
mod data;
mod evaluate;
mod export;
mod gradsuite;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, RngState, Trained, Weights, FORMAT_VERSION, MAGIC};
pub use config::{Device, LossKind, OptimizerConfig, OptimizerKind, TrainConfig, Variant};
pub use data::{eval_crops, features, stack, targets, train_crop, Dataset, Sample};
pub use evaluate::{evaluate, predict_logits};
pub use export::{export_attention, lead_names};
pub use gradsuite::{
    end_to_end_error, gradient_suite, tiny_model, SuiteCheck, END_TO_END_STEP, END_TO_END_TOL, PRIMITIVE_STEP, PRIMITIVE_TOL,
};
pub use optim::Optimizer;
pub use train::{init_checkpoint, loss, resume, train, EpochLog, ValidationLog};
