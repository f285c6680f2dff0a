//! Synthetic data, the teacher-forcing training loop, AdamW, evaluation and
//! the masked-modeling gradient demonstration.

mod baseline;
mod dataset;
mod eval;
mod optim;
mod train;

pub use baseline::{
    arpg_grad_contrast, masked_baseline_grad_demo, masked_baseline_grad_demo_with, BaselineShape, ContrastReport,
    GradDemoReport,
};
pub use dataset::{make_dataset, templates, ShapeKind, ToyDataset, ToyDatasetSpec, TokenGrid, BACKGROUND};
pub use eval::{evaluate, generation_validity, teacher_forcing_accuracy, EvalMetrics};
pub use optim::{adamw_update, clip_grad_norm, cosine_lr, grad_norm, AdamWConfig, OptimState};
pub use train::{train_step, StepStats, TrainConfig, Trainer};
