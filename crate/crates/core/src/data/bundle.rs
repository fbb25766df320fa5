//! A dataset directory: features, voxels, responses and (optionally) a split,
//! cross-checked on load.

use std::path::Path;

use super::features::{read_feature_store, write_feature_store, FeatureStore};
use super::responses::{read_responses, write_responses, ResponseSet, RESPONSES_FILE};
use super::split::{read_split, write_split, SplitSpec, SPLIT_FILE};
use super::voxels::{read_voxel_table, write_voxel_table, VoxelTable, VOXELS_FILE};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: FeatureStore,
    pub voxels: VoxelTable,
    pub responses: ResponseSet,
    pub split: Option<SplitSpec>,
}

impl Dataset {
    pub fn new(
        features: FeatureStore,
        voxels: VoxelTable,
        responses: ResponseSet,
        split: Option<SplitSpec>,
    ) -> Result<Self> {
        let d = Self {
            features,
            voxels,
            responses,
            split,
        };
        d.cross_validate()?;
        Ok(d)
    }

    /// Image rows and voxel columns must line up across all three files.
    pub fn cross_validate(&self) -> Result<()> {
        if self.responses.image_ids != self.features.image_ids {
            return Err(Error::Invalid(format!(
                "responses cover {} images in a different order/count than the feature store ({})",
                self.responses.n_images(),
                self.features.n_images()
            )));
        }
        if self.responses.voxel_ids.len() != self.voxels.len()
            || self
                .responses
                .voxel_ids
                .iter()
                .zip(&self.voxels.voxels)
                .any(|(a, v)| *a != v.id)
        {
            return Err(Error::Invalid(format!(
                "responses have {} voxel columns not matching the voxel table ({})",
                self.responses.n_voxels(),
                self.voxels.len()
            )));
        }
        if let Some(s) = &self.split {
            s.validate_against(&self.features.image_ids)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let features = read_feature_store(dir)?;
        let voxels = read_voxel_table(&dir.join(VOXELS_FILE))?;
        let responses = read_responses(&dir.join(RESPONSES_FILE))?;
        let sp = dir.join(SPLIT_FILE);
        let split = if sp.exists() {
            Some(read_split(&sp)?)
        } else {
            None
        };
        Self::new(features, voxels, responses, split)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_feature_store(&self.features, dir)?;
        write_voxel_table(&self.voxels, &dir.join(VOXELS_FILE))?;
        write_responses(&self.responses, &dir.join(RESPONSES_FILE))?;
        if let Some(s) = &self.split {
            write_split(s, &dir.join(SPLIT_FILE))?;
        }
        Ok(())
    }

    /// Image indices for (train, val, test); requires a split.
    pub fn split_indices(&self) -> Result<[Vec<usize>; 3]> {
        let s = self
            .split
            .as_ref()
            .ok_or_else(|| Error::Invalid("dataset has no split".into()))?;
        s.indices(&self.features.image_ids)
    }
}
