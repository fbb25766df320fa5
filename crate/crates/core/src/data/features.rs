//! Precomputed backbone feature grids: `manifest.json` + `features.bin`.
//!
//! `features.bin` is raw little-endian f32 laid out
//! `[image][layer][channel][row][col]`; its size must equal
//! `n_images * layers * channels * grid * grid * 4` bytes.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{read_f32_file, read_json, write_f32_file, write_json};
use crate::error::{Error, Result};

pub const FEATURES_FORMAT: &str = "voxelcast-features/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURES_FILE: &str = "features.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureManifest {
    pub format: String,
    pub image_ids: Vec<String>,
    pub layers: usize,
    pub channels: usize,
    pub grid: usize,
}

/// Per-image, per-layer feature grids, immutable once loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    pub image_ids: Vec<String>,
    pub layers: usize,
    pub channels: usize,
    pub grid: usize,
    data: Vec<f32>,
}

impl FeatureStore {
    pub fn new(
        image_ids: Vec<String>,
        layers: usize,
        channels: usize,
        grid: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let store = Self {
            image_ids,
            layers,
            channels,
            grid,
            data,
        };
        store.validate()?;
        Ok(store)
    }

    fn validate(&self) -> Result<()> {
        let want = self.image_ids.len() * self.image_len();
        if self.data.len() != want {
            return Err(Error::Invalid(format!(
                "feature data has {} values, expected {want}",
                self.data.len()
            )));
        }
        if self.layers == 0 || self.channels == 0 || self.grid == 0 {
            return Err(Error::Invalid("feature grids need L, D_in, G >= 1".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.image_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Invalid(format!("duplicate image id `{dup}`")));
        }
        Ok(())
    }

    pub fn n_images(&self) -> usize {
        self.image_ids.len()
    }

    /// Values per image: `L * D_in * G * G`.
    pub fn image_len(&self) -> usize {
        self.layers * self.layer_len()
    }

    pub fn layer_len(&self) -> usize {
        self.channels * self.grid * self.grid
    }

    /// `[L x D_in x G x G]` block of one image.
    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn layer(&self, i: usize, l: usize) -> &[f32] {
        let n = self.layer_len();
        &self.image(i)[l * n..(l + 1) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// New store holding only the listed images, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Self {
            image_ids: indices.iter().map(|&i| self.image_ids[i].clone()).collect(),
            layers: self.layers,
            channels: self.channels,
            grid: self.grid,
            data,
        }
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.image_ids.iter().position(|x| x == id)
    }

    pub fn manifest(&self) -> FeatureManifest {
        FeatureManifest {
            format: FEATURES_FORMAT.into(),
            image_ids: self.image_ids.clone(),
            layers: self.layers,
            channels: self.channels,
            grid: self.grid,
        }
    }
}

/// Writes `manifest.json` and `features.bin` into `dir`.
pub fn write_feature_store(store: &FeatureStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join(MANIFEST_FILE), &store.manifest())?;
    write_f32_file(&dir.join(FEATURES_FILE), &store.data)
}

pub fn read_feature_store(dir: &Path) -> Result<FeatureStore> {
    let mpath = dir.join(MANIFEST_FILE);
    let manifest: FeatureManifest = read_json(&mpath)?;
    if manifest.format != FEATURES_FORMAT {
        return Err(Error::format(
            &mpath,
            format!("bad magic `{}`", manifest.format),
        ));
    }
    let per = manifest.layers * manifest.channels * manifest.grid * manifest.grid;
    let data = read_f32_file(&dir.join(FEATURES_FILE), manifest.image_ids.len() * per)?;
    FeatureStore::new(
        manifest.image_ids,
        manifest.layers,
        manifest.channels,
        manifest.grid,
        data,
    )
    .map_err(|e| Error::format(&mpath, e.to_string()))
}
