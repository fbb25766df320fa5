use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of residual conv blocks in the adapter.
pub const ADAPTER_BLOCKS: usize = 3;

/// Shape and hyper-parameters of an encoder. The adapter keeps the input
/// channel count through its residual blocks (`C = D_in`) and projects to
/// `out_dim` in the final conv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub in_channels: usize,
    pub out_dim: usize,
    pub grid: usize,
    #[serde(default = "default_pe_freqs")]
    pub pe_freqs: usize,
    /// Width of both hidden layers of the mapper and selector MLPs.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_hidden")]
    pub pooled_hidden: usize,
    /// Training-time jitter on retina coordinates.
    #[serde(default = "default_sigma")]
    pub sigma: f32,
    #[serde(default = "default_true")]
    pub global_pool: bool,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f32,
}

fn default_pe_freqs() -> usize {
    4
}
fn default_hidden() -> usize {
    128
}
fn default_sigma() -> f32 {
    0.02
}
fn default_true() -> bool {
    true
}
fn default_ln_eps() -> f32 {
    1e-5
}

impl EncoderConfig {
    pub fn new(layers: usize, in_channels: usize, out_dim: usize, grid: usize) -> Self {
        Self {
            layers,
            in_channels,
            out_dim,
            grid,
            pe_freqs: default_pe_freqs(),
            hidden: default_hidden(),
            pooled_hidden: default_hidden(),
            sigma: default_sigma(),
            global_pool: true,
            ln_eps: default_ln_eps(),
        }
    }

    pub fn pe_dim(&self) -> usize {
        6 * self.pe_freqs
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.in_channels == 0 || self.out_dim == 0 || self.grid == 0 {
            return Err(Error::Invalid("encoder needs L, D_in, D, G >= 1".into()));
        }
        if self.pe_freqs == 0 || self.hidden == 0 || self.pooled_hidden == 0 {
            return Err(Error::Invalid(
                "encoder needs F >= 1 and non-empty hidden layers".into(),
            ));
        }
        if !(self.sigma >= 0.0) || !(self.ln_eps > 0.0) {
            return Err(Error::Invalid("sigma must be >= 0 and ln_eps > 0".into()));
        }
        Ok(())
    }
}

/// Data-independent model settings; the layer count, input channels and
/// grid come from the feature store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    /// Adapter output width; the input channel count when unset.
    pub out_dim: Option<usize>,
    pub pe_freqs: usize,
    pub hidden: usize,
    pub pooled_hidden: usize,
    pub sigma: f32,
    pub global_pool: bool,
    /// Pin every voxel to the grid centre.
    pub frozen_rm: bool,
    /// Pin the layer weights to uniform.
    pub frozen_ls: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            out_dim: None,
            pe_freqs: default_pe_freqs(),
            hidden: default_hidden(),
            pooled_hidden: default_hidden(),
            sigma: default_sigma(),
            global_pool: true,
            frozen_rm: false,
            frozen_ls: false,
        }
    }
}

impl ModelSpec {
    pub fn config(&self, layers: usize, in_channels: usize, grid: usize) -> EncoderConfig {
        EncoderConfig {
            pe_freqs: self.pe_freqs,
            hidden: self.hidden,
            pooled_hidden: self.pooled_hidden,
            sigma: self.sigma,
            global_pool: self.global_pool,
            ..EncoderConfig::new(
                layers,
                in_channels,
                self.out_dim.unwrap_or(in_channels),
                grid,
            )
        }
    }
}
