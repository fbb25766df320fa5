use serde::{Deserialize, Serialize};

use crate::encoder::ModelSpec;
use crate::error::{Error, Result};
use crate::numcore::SeededRng;
use crate::trainer::TrainConfig;
use crate::veroi::Parcellation;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Variant {
    /// Skip the recipe and train one all-ROI model on ground truth.
    pub naive_mix: bool,
    /// Stage-2 helpers use ground truth instead of stage-1 predictions.
    pub no_dk: bool,
    /// Replace the parcellation with a random one of identical sizes.
    pub rand_roi: bool,
    /// Extra stage-2 rounds, each distilled from the previous round.
    pub extra_s2_iters: usize,
    /// Start stage 3 from the first stage-2 model's trunk instead of a
    /// fresh initialisation.
    pub warm_start_s3: bool,
}

/// Everything the recipe needs besides the data and the parcellation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipePlan {
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub stage1: TrainConfig,
    #[serde(default)]
    pub stage2: TrainConfig,
    #[serde(default)]
    pub stage3: TrainConfig,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub seed: u64,
    /// Concurrent ROI jobs.
    #[serde(default = "one")]
    pub workers: usize,
}

fn one() -> usize {
    1
}

impl Default for RecipePlan {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            stage1: TrainConfig::default(),
            stage2: TrainConfig::default(),
            stage3: TrainConfig::default(),
            variant: Variant::default(),
            seed: 0,
            workers: 1,
        }
    }
}

impl RecipePlan {
    /// Same training settings for every stage.
    pub fn uniform(model: ModelSpec, train: TrainConfig, seed: u64) -> Self {
        Self {
            model,
            stage1: train.clone(),
            stage2: train.clone(),
            stage3: train,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in [&self.stage1, &self.stage2, &self.stage3] {
            c.validate()?;
        }
        if self.workers == 0 {
            return Err(Error::Invalid("recipe needs at least one worker".into()));
        }
        Ok(())
    }
}

/// A uniformly random partition with exactly the input's ROI sizes.
pub fn make_rand_roi(parc: &Parcellation, seed: u64) -> Parcellation {
    let mut order: Vec<usize> = (0..parc.labels.len()).collect();
    SeededRng::new(seed).shuffle(&mut order);
    let mut labels = vec![0; order.len()];
    let mut at = 0;
    for (k, size) in parc.sizes().into_iter().enumerate() {
        for &v in &order[at..at + size] {
            labels[v] = k;
        }
        at += size;
    }
    Parcellation {
        names: (0..parc.n_rois()).map(|k| format!("rand{k}")).collect(),
        voxel_ids: parc.voxel_ids.clone(),
        labels,
    }
}
