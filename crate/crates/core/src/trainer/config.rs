use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::AdaBeliefConfig;

/// Voxels sampled per datapoint at full scale; [`TrainConfig::default`]
/// uses a desk-scale cap instead.
pub const FULL_SCALE_VOXEL_CAP: usize = 8000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch: usize,
    pub wd: f32,
    pub betas: [f32; 2],
    pub eps: f32,
    pub beta_smoothl1: f32,
    pub lambda_ent: f32,
    pub lambda_dk: f32,
    /// Non-improving validations tolerated before stopping.
    pub patience: usize,
    /// Fraction of the training images that makes up one epoch.
    pub epoch_fraction: f32,
    pub voxel_cap: usize,
    pub soup_top_k: usize,
    /// Hard stop for runs that never plateau.
    pub max_epochs: usize,
    /// Validation improvement smaller than this counts as a tie.
    pub tie_tolerance: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.003,
            batch: 128,
            wd: 1e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            beta_smoothl1: 0.01,
            lambda_ent: 3e-5,
            lambda_dk: 1.0,
            patience: 20,
            epoch_fraction: 0.1,
            voxel_cap: 512,
            soup_top_k: 10,
            max_epochs: 500,
            tie_tolerance: 1e-5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr > 0.0),
            ("batch", self.batch > 0),
            ("beta_smoothl1", self.beta_smoothl1 > 0.0),
            ("patience", self.patience > 0),
            ("voxel_cap", self.voxel_cap > 0),
            ("soup_top_k", self.soup_top_k > 0),
            ("max_epochs", self.max_epochs > 0),
            ("eps", self.eps > 0.0),
            ("wd", self.wd >= 0.0),
            ("lambda_ent", self.lambda_ent >= 0.0),
            ("lambda_dk", self.lambda_dk >= 0.0),
            ("tie_tolerance", self.tie_tolerance >= 0.0),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, ok)| !ok) {
            return Err(Error::Invalid(format!(
                "train config: `{name}` out of range"
            )));
        }
        if !(self.epoch_fraction > 0.0 && self.epoch_fraction <= 1.0) {
            return Err(Error::Invalid(
                "train config: epoch_fraction must lie in (0, 1]".into(),
            ));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(Error::Invalid(
                "train config: betas must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdaBeliefConfig {
        AdaBeliefConfig {
            lr: self.lr,
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.eps,
            weight_decay: self.wd,
        }
    }

    /// Optimizer steps per epoch for `n_train` training images.
    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        let images = (self.epoch_fraction as f64 * n_train as f64).ceil() as usize;
        images.div_ceil(self.batch).max(1)
    }
}
