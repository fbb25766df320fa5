use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_json, write_json, VoxelTable};
use crate::error::{Error, Result};

/// A partition of the voxel table into named ROIs.
#[derive(Clone, Debug, PartialEq)]
pub struct Parcellation {
    pub names: Vec<String>,
    pub voxel_ids: Vec<String>,
    pub labels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParcellationFile {
    rois: Vec<String>,
    assignment: BTreeMap<String, usize>,
}

impl Parcellation {
    pub fn new(names: Vec<String>, voxel_ids: Vec<String>, labels: Vec<usize>) -> Result<Self> {
        if voxel_ids.len() != labels.len() {
            return Err(Error::shape("parcellation", voxel_ids.len(), labels.len()));
        }
        let mut sizes = vec![0usize; names.len()];
        for &l in &labels {
            *sizes.get_mut(l).ok_or_else(|| {
                Error::Invalid(format!("parcellation label {l} with {} ROIs", names.len()))
            })? += 1;
        }
        if let Some(k) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Invalid(format!(
                "parcellation ROI `{}` is empty",
                names[k]
            )));
        }
        Ok(Self {
            names,
            voxel_ids,
            labels,
        })
    }

    /// ROIs from the voxel table's labels; every voxel must carry one.
    pub fn from_voxel_rois(table: &VoxelTable) -> Result<Self> {
        let (names, labels) = table.roi_labels();
        let labels = labels
            .iter()
            .zip(&table.voxels)
            .map(|(l, v)| {
                l.ok_or_else(|| Error::Invalid(format!("voxel `{}` has no ROI label", v.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(names, table.ids(), labels)
    }

    /// Everything in one ROI.
    pub fn single(table: &VoxelTable, name: &str) -> Self {
        Self {
            names: vec![name.to_string()],
            voxel_ids: table.ids(),
            labels: vec![0; table.len()],
        }
    }

    /// Labels numbered `0..k` with generated names `{prefix}{k}`.
    pub fn from_labels(table: &VoxelTable, labels: Vec<usize>, prefix: &str) -> Result<Self> {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        Self::new(
            (0..k).map(|i| format!("{prefix}{i}")).collect(),
            table.ids(),
            labels,
        )
    }

    pub fn n_rois(&self) -> usize {
        self.names.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.names.len()];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }

    pub fn members(&self, roi: usize) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&v| self.labels[v] == roi)
            .collect()
    }

    pub fn groups(&self) -> Vec<(String, Vec<usize>)> {
        self.names
            .iter()
            .enumerate()
            .map(|(k, n)| (n.clone(), self.members(k)))
            .collect()
    }

    /// Fails unless the voxel ids match the table row for row.
    pub fn check_against(&self, table: &VoxelTable) -> Result<()> {
        if self.voxel_ids.len() != table.len()
            || self
                .voxel_ids
                .iter()
                .zip(&table.voxels)
                .any(|(a, v)| *a != v.id)
        {
            return Err(Error::Invalid(
                "parcellation does not match the voxel table".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ParcellationFile {
            rois: self.names.clone(),
            assignment: self
                .voxel_ids
                .iter()
                .cloned()
                .zip(self.labels.iter().copied())
                .collect(),
        };
        write_json(path, &file)
    }

    /// Reads a parcellation and orders it like `table`.
    pub fn load(path: &Path, table: &VoxelTable) -> Result<Self> {
        let file: ParcellationFile = read_json(path)?;
        if file.assignment.len() != table.len() {
            return Err(Error::format(
                path,
                format!(
                    "{} assignments for {} voxels",
                    file.assignment.len(),
                    table.len()
                ),
            ));
        }
        let labels = table
            .voxels
            .iter()
            .map(|v| {
                file.assignment
                    .get(&v.id)
                    .copied()
                    .ok_or_else(|| Error::format(path, format!("voxel `{}` unassigned", v.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(file.rois, table.ids(), labels)
    }

    pub fn size_table_csv(&self) -> String {
        let mut out = String::from("roi,name,size\n");
        for (k, (name, size)) in self.names.iter().zip(self.sizes()).enumerate() {
            out.push_str(&format!("{k},{name},{size}\n"));
        }
        out
    }
}
