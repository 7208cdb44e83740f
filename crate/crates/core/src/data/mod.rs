//! Dataset ingestion, tiling, augmentation and statistics.

pub mod augment;
pub mod dataset;
pub mod image;
pub mod manifest;
pub mod mixup;
pub mod stats;
pub mod synth;
pub mod tiny;

pub use augment::{AugMode, CropStyle, Normalization, Preprocessor};
pub use dataset::Dataset;
pub use manifest::{ingest, DatasetManifest, IngestOptions, ManifestEntry, Split};
pub use mixup::{mixup_batch, one_hot, MixupConfig};
