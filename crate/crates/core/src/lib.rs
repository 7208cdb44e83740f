//! Feature-pyramid classifiers with competitive attention and spatial
//! recalibration, over pre-activation ResNet backbones.

pub mod backbone;
pub mod checks;
pub mod data;
pub mod error;
pub mod introspect;
pub mod model;
pub mod nn;
pub mod params;
pub mod pyramid;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Model, ModelSpec};
