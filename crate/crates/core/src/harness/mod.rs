//! Configuration, optimizer, training loop, learning-rate sweep and attention export.

pub mod config;
pub mod dump;
pub mod optim;
pub mod sweep;
pub mod train;

pub use config::{Config, SEED_ENV};
pub use dump::{attention_dump, AttentionDump, LayerAttention, StreamAttention};
pub use optim::{radam_step, OptimizerConfig, OptimizerKind, StepInfo, TrainState};
pub use sweep::{lr_sweep, parse_lrs, write_sweep_csv, RunStatus, SweepRow, SWEEP_ACTIVATIONS};
pub use train::{load_data, train, train_on, EpochLog, TrainOutcome};
