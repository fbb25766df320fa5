//! Row-major f32 matrices with a JSON sidecar; used for responses
//! (`responses.bin` + `responses.json`) and for cached teacher predictions.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{read_f32_file, read_json, write_f32_file, write_json};
use crate::error::{Error, Result};

pub const MATRIX_FORMAT: &str = "voxelcast-matrix/1";
pub const RESPONSES_FILE: &str = "responses.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSidecar {
    pub format: String,
    pub rows: usize,
    pub cols: usize,
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetitions: Option<Vec<u32>>,
}

/// Sidecar path: same stem, `.json` extension.
pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Repetition-averaged responses, `[image × voxel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseSet {
    pub image_ids: Vec<String>,
    pub voxel_ids: Vec<String>,
    /// Number of repetitions averaged into each image row.
    pub repetitions: Vec<u32>,
    values: Vec<f32>,
}

impl ResponseSet {
    pub fn new(
        image_ids: Vec<String>,
        voxel_ids: Vec<String>,
        repetitions: Vec<u32>,
        values: Vec<f32>,
    ) -> Result<Self> {
        if values.len() != image_ids.len() * voxel_ids.len() {
            return Err(Error::Invalid(format!(
                "response matrix has {} values, expected {}x{}",
                values.len(),
                image_ids.len(),
                voxel_ids.len()
            )));
        }
        if repetitions.len() != image_ids.len() {
            return Err(Error::Invalid(
                "one repetition count per image required".into(),
            ));
        }
        if let Some(i) = values.iter().position(|v| v.is_nan()) {
            let n = voxel_ids.len().max(1);
            return Err(Error::Invalid(format!(
                "NaN response at image `{}`, voxel `{}`",
                image_ids[i / n],
                voxel_ids[i % n]
            )));
        }
        Ok(Self {
            image_ids,
            voxel_ids,
            repetitions,
            values,
        })
    }

    pub fn n_images(&self) -> usize {
        self.image_ids.len()
    }

    pub fn n_voxels(&self) -> usize {
        self.voxel_ids.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.n_voxels();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn get(&self, image: usize, voxel: usize) -> f32 {
        self.values[image * self.n_voxels() + voxel]
    }

    /// One voxel's responses across all images.
    pub fn column(&self, voxel: usize) -> Vec<f32> {
        (0..self.n_images()).map(|i| self.get(i, voxel)).collect()
    }

    pub fn subset_images(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.n_voxels());
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self {
            image_ids: indices.iter().map(|&i| self.image_ids[i].clone()).collect(),
            voxel_ids: self.voxel_ids.clone(),
            repetitions: indices.iter().map(|&i| self.repetitions[i]).collect(),
            values,
        }
    }
}

/// Averages repeated presentations of each image in f64.
pub fn repetition_average(raw: &[(String, Vec<Vec<f32>>)]) -> Result<ResponseSet> {
    let n_vox = raw
        .iter()
        .flat_map(|(_, reps)| reps.first())
        .map(|r| r.len())
        .next()
        .unwrap_or(0);
    let mut values = Vec::with_capacity(raw.len() * n_vox);
    let mut repetitions = Vec::with_capacity(raw.len());
    for (id, reps) in raw {
        if reps.is_empty() {
            return Err(Error::Invalid(format!("image `{id}` has no repetitions")));
        }
        let mut acc = vec![0.0f64; n_vox];
        for r in reps {
            if r.len() != n_vox {
                return Err(Error::Invalid(format!(
                    "ragged voxel count for image `{id}`: {} vs {n_vox}",
                    r.len()
                )));
            }
            for (a, v) in acc.iter_mut().zip(r) {
                *a += *v as f64;
            }
        }
        let k = reps.len() as f64;
        values.extend(acc.iter().map(|a| (a / k) as f32));
        repetitions.push(reps.len() as u32);
    }
    let voxel_ids = (0..n_vox).map(|j| format!("v{j}")).collect();
    ResponseSet::new(
        raw.iter().map(|(id, _)| id.clone()).collect(),
        voxel_ids,
        repetitions,
        values,
    )
}

pub fn write_matrix(path: &Path, sidecar: &MatrixSidecar, values: &[f32]) -> Result<()> {
    if values.len() != sidecar.rows * sidecar.cols {
        return Err(Error::Invalid(
            "matrix values disagree with sidecar shape".into(),
        ));
    }
    write_f32_file(path, values)?;
    write_json(&sidecar_path(path), sidecar)
}

pub fn read_matrix(path: &Path) -> Result<(MatrixSidecar, Vec<f32>)> {
    let spath = sidecar_path(path);
    let side: MatrixSidecar = read_json(&spath)?;
    if side.format != MATRIX_FORMAT {
        return Err(Error::format(
            &spath,
            format!("bad magic `{}`", side.format),
        ));
    }
    if side.row_ids.len() != side.rows || side.col_ids.len() != side.cols {
        return Err(Error::format(&spath, "id lists disagree with rows/cols"));
    }
    let values = read_f32_file(path, side.rows * side.cols)?;
    Ok((side, values))
}

pub fn write_responses(set: &ResponseSet, path: &Path) -> Result<()> {
    let side = MatrixSidecar {
        format: MATRIX_FORMAT.into(),
        rows: set.n_images(),
        cols: set.n_voxels(),
        row_ids: set.image_ids.clone(),
        col_ids: set.voxel_ids.clone(),
        repetitions: Some(set.repetitions.clone()),
    };
    write_matrix(path, &side, &set.values)
}

pub fn read_responses(path: &Path) -> Result<ResponseSet> {
    let (side, values) = read_matrix(path)?;
    let reps = side.repetitions.unwrap_or_else(|| vec![1; side.rows]);
    ResponseSet::new(side.row_ids, side.col_ids, reps, values)
        .map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::SeededRng;

    #[test]
    fn averages_pairs_and_keeps_singletons() {
        let raw = vec![
            ("a".to_string(), vec![vec![1.0f32, -2.0], vec![3.0, 2.0]]),
            ("b".to_string(), vec![vec![0.25, 7.0]]),
        ];
        let set = repetition_average(&raw).unwrap();
        assert_eq!(set.row(0), &[2.0, 0.0]);
        assert_eq!(set.row(1), &[0.25, 7.0]);
        assert_eq!(set.repetitions, vec![2, 1]);
    }

    #[test]
    fn hundred_repeats_match_f64_mean() {
        let mut rng = SeededRng::new(5);
        let reps: Vec<Vec<f32>> = (0..100)
            .map(|_| (0..4).map(|_| rng.normal() as f32).collect())
            .collect();
        let set = repetition_average(&[("x".into(), reps.clone())]).unwrap();
        for j in 0..4 {
            let mean = reps.iter().map(|r| r[j] as f64).sum::<f64>() / 100.0;
            assert!((set.get(0, j) as f64 - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn ragged_and_nan_rejected() {
        let raw = vec![("a".to_string(), vec![vec![1.0f32, 2.0], vec![3.0]])];
        assert!(repetition_average(&raw)
            .unwrap_err()
            .to_string()
            .contains("ragged"));
        let raw = vec![("a".to_string(), vec![vec![f32::NAN]])];
        assert!(repetition_average(&raw).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = ResponseSet::new(
            vec!["i0".into(), "i1".into()],
            vec!["v0".into(), "v1".into(), "v2".into()],
            vec![3, 1],
            vec![0.1, 0.2, 0.3, -1.0, 1e-30, 5.0],
        )
        .unwrap();
        let path = dir.path().join(RESPONSES_FILE);
        write_responses(&set, &path).unwrap();
        assert_eq!(read_responses(&path).unwrap(), set);
        assert_eq!(set.column(1), vec![0.2, 1e-30]);
    }
}
