//! Three-stage training, checkpointing, sampling, evaluation runs and
//! ablations, driven by a [`RunConfig`].

pub mod checkpoint;
pub mod config;
pub mod run;
pub mod train;

pub use checkpoint::{load_generator, load_trainer, save_trainer, Generator};
pub use config::{Ablation, DatasetConfig, DiffusionConfig, Epochs, ModelConfig, RunConfig};
pub use run::{ablate, evaluate, prepare_dataset, sample, train, AblationRow, EvalOutcome, RunPaths, StageSelect, TrainOptions};
pub use train::{generate, refine, split_dataset, LogRow, Models, Progress, Stage, TermPolicy, Trainer};

/// Random stream ids, one per purpose, so that each consumer's draws are
/// independent of how much the others have used.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const STAGE1_BATCHES: u64 = 4;
    pub const STAGE2_BATCHES: u64 = 5;
    pub const STAGE2_NOISE: u64 = 6;
    pub const STAGE3_BATCHES: u64 = 7;
    pub const STAGE3_NOISE: u64 = 8;
    pub const CRITIC: u64 = 9;
    pub const BASELINE: u64 = 10;
    pub const SAMPLING: u64 = 11;
    pub const EVAL_SAMPLING: u64 = 12;
    pub const NULL: u64 = 13;
    /// First of the per-repeat metric streams.
    pub const METRICS: u64 = 100;
}
