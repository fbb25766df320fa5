//! Voxel coordinates, subjects, modality tags and optional anatomical ROI labels.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{read_json, write_json};
use crate::error::{Error, Result};

pub const VOXELS_FILE: &str = "voxels.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "fMRI")]
    Fmri,
    #[serde(rename = "EEG")]
    Eeg,
    #[serde(rename = "MEG")]
    Meg,
    #[serde(rename = "synthetic")]
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Voxel {
    pub id: String,
    pub subject: String,
    pub modality: Modality,
    pub p: [f32; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelTable {
    pub voxels: Vec<Voxel>,
}

impl VoxelTable {
    pub fn new(voxels: Vec<Voxel>) -> Result<Self> {
        let t = Self { voxels };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for v in &self.voxels {
            if !seen.insert(v.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate voxel id `{}`", v.id)));
            }
            if v.p.iter().any(|c| !c.is_finite()) {
                return Err(Error::Invalid(format!(
                    "voxel `{}` has non-finite coordinates",
                    v.id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.voxels.iter().map(|v| v.id.clone()).collect()
    }

    pub fn coords(&self) -> Vec<[f32; 3]> {
        self.voxels.iter().map(|v| v.p).collect()
    }

    /// Distinct anatomical ROI labels in first-seen order, and each voxel's
    /// index into that list (`None` if unlabeled).
    pub fn roi_labels(&self) -> (Vec<String>, Vec<Option<usize>>) {
        let mut names: Vec<String> = Vec::new();
        let idx = self
            .voxels
            .iter()
            .map(|v| {
                v.roi
                    .as_ref()
                    .map(|r| match names.iter().position(|n| n == r) {
                        Some(k) => k,
                        None => {
                            names.push(r.clone());
                            names.len() - 1
                        }
                    })
            })
            .collect();
        (names, idx)
    }

    /// Maps each subject's bounding box onto [−1,1]³, axis by axis.
    ///
    /// Degenerate axes (zero extent) collapse to 0. An axis whose extent is
    /// already exactly [−1,1] is left untouched, which makes the map
    /// idempotent bit-for-bit.
    pub fn normalize_coordinates(&mut self) {
        let mut boxes: BTreeMap<&str, ([f32; 3], [f32; 3])> = BTreeMap::new();
        for v in &self.voxels {
            let e = boxes
                .entry(v.subject.as_str())
                .or_insert(([f32::INFINITY; 3], [f32::NEG_INFINITY; 3]));
            for a in 0..3 {
                e.0[a] = e.0[a].min(v.p[a]);
                e.1[a] = e.1[a].max(v.p[a]);
            }
        }
        let boxes: BTreeMap<String, ([f32; 3], [f32; 3])> =
            boxes.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        for v in &mut self.voxels {
            let (lo, hi) = boxes[&v.subject];
            for a in 0..3 {
                if lo[a] == -1.0 && hi[a] == 1.0 {
                    continue;
                }
                let ext = hi[a] as f64 - lo[a] as f64;
                v.p[a] = if ext > 0.0 {
                    let t = (v.p[a] as f64 - lo[a] as f64) / ext * 2.0 - 1.0;
                    t.clamp(-1.0, 1.0) as f32
                } else {
                    0.0
                };
            }
        }
    }
}

pub fn write_voxel_table(table: &VoxelTable, path: &Path) -> Result<()> {
    write_json(path, table)
}

pub fn read_voxel_table(path: &Path) -> Result<VoxelTable> {
    let t: VoxelTable = read_json(path)?;
    t.validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(t)
}
