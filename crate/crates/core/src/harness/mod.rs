//! Training, evaluation, checkpointing and ablation sweeps.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod train;

pub use ablate::{parse_axes, run_ablation, AblationAxis, AblationRow, AblationTable};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use config::{OptimizerKind, TrainConfig};
pub use train::{evaluate_checkpoint, evaluate_model, predict_batched, train, train_to_dir, EpochLog, RunRecord, TrainOutcome};
