//! Trainable encoder: conv adapter over ingested feature grids, TopyNeck
//! (RetinaMapper, LayerSelector, pooled branch) and per-voxel linear heads.

pub mod adapter;
pub mod config;
pub mod io;
pub mod mlp;
pub mod model;
pub mod pe;

#[cfg(test)]
mod tests;

pub use adapter::Adapter;
pub use config::{EncoderConfig, ModelSpec, ADAPTER_BLOCKS};
pub use io::{ModelObjective, CHECKPOINT_KIND};
pub use mlp::Mlp;
pub use model::{jitter, EncoderModel, ImageCache, ParamCount, Readout, TopyCache, U_LIMIT};
pub use pe::positional_encode;
