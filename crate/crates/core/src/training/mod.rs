//! The composite objective, the optimizer, the training loop and checkpoints.

mod bundle;
mod checkpoint;
mod config;
mod optim;
mod trainer;

pub use bundle::{
    compose_total_loss, validate_metrics_log, LogReport, LossBundle, MetricsLine, LOG_IDENTITY_TOL,
};
pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_EXTENSION};
pub use config::{ImageAlignment, TrainConfig};
pub use optim::{grad_norm, Sgd};
pub use trainer::{
    fit, fit_with_hook, hflip, FitOutcome, Trainer, CHECKPOINT_FILE, CONFIG_FILE, DIVERGENCE_FILE,
    DIVERGENCE_LIMIT, METRICS_FILE, RECENT_BUNDLES,
};
