//! Presets, the Nesterov optimizer, the training loop and checkpoints.

pub mod checkpoint;
pub mod optim;
pub mod preset;
pub mod run;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use optim::SgdNesterov;
pub use preset::{preset, TrainConfig, PRESET_NAMES};
pub use run::{evaluate, train, EpochRecord, RunRecord};
