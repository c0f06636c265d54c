//! The imaging model: a two-stage 3D transformer encoder with class-token
//! pooling attention modules (early, supervised; late, classification) and
//! the clinical projector, parameterized by training stage.

mod checkpoint;
mod config;
mod net;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use config::{EncoderConfig, ModelConfig};
pub use net::{AttentionArtifacts, FeatureMaps, ForwardOut, Model};
pub use params::{layout, BoundParams, ParamDef, ParamStore, Stage};
