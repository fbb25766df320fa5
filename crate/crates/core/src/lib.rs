//! Voxel-wise brain encoding models trained from scratch: a retinotopic
//! readout neck over frozen backbone features, a multi-stage distillation
//! recipe, encoding-weight parcellation, evaluation and decoding, all
//! checked against synthetic brains with planted ground truth.

pub mod afo;
pub mod data;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod gradsuite;
pub mod numcore;
pub mod scalar;
pub mod synth;
pub mod trainer;
pub mod veroi;

pub use error::{Error, Result};

pub type Tensor32 = numcore::Tensor<f32>;
pub type Tensor64 = numcore::Tensor<f64>;
pub type Param32 = numcore::Param<f32>;
pub type Param64 = numcore::Param<f64>;
/// Training precision.
pub type Model32 = encoder::EncoderModel<f32>;
/// Gradient-check precision.
pub type Model64 = encoder::EncoderModel<f64>;
