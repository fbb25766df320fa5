//! Voxel-wise encoding ROIs: k-means over per-voxel head weights, Ward
//! agglomeration of the centroids, and a threshold cut.

pub mod ari;
pub mod kmeans;
pub mod parcellation;
pub mod ward;

use serde::{Deserialize, Serialize};

pub use ari::adjusted_rand_index;
pub use kmeans::{kmeans_euclid, KMeans};
pub use parcellation::Parcellation;
pub use ward::{cut_dendrogram, ward_linkage, Dendrogram, Merge};

use crate::encoder::EncoderModel;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VeroiConfig {
    /// k-means cluster count; `None` picks `min(500, N/10)`.
    #[serde(default)]
    pub kmeans_k: Option<usize>,
    /// Ward distance below which clusters are joined.
    pub threshold: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_iter")]
    pub max_iter: usize,
}

fn default_iter() -> usize {
    300
}

impl VeroiConfig {
    pub fn new(threshold: f64) -> Self {
        Self {
            kmeans_k: None,
            threshold,
            seed: 0,
            max_iter: default_iter(),
        }
    }

    pub fn k_for(&self, n: usize) -> usize {
        self.kmeans_k
            .unwrap_or((n / 10).min(500))
            .clamp(1, n.max(1))
    }
}

#[derive(Clone, Debug)]
pub struct VeroiResult {
    /// ROI per voxel.
    pub labels: Vec<usize>,
    pub n_rois: usize,
    pub dendrogram: Dendrogram,
    /// k-means cluster per voxel (the dendrogram's leaves).
    pub clusters: Vec<usize>,
}

/// Element-wise mean of the models' head weights, `[N x D]`.
pub fn average_head_weights(models: &[EncoderModel<f32>]) -> Result<Vec<f64>> {
    let first = models
        .first()
        .ok_or_else(|| Error::Invalid("veROI needs at least one model".into()))?;
    let shape = first.head_w.shape().to_vec();
    let mut acc = vec![0.0f64; first.head_w.len()];
    for m in models {
        if m.head_w.shape() != shape.as_slice() {
            return Err(Error::shape(
                "average_head_weights",
                format!("{shape:?}"),
                format!("{:?}", m.head_w.shape()),
            ));
        }
        for (a, v) in acc.iter_mut().zip(m.head_w.value.data()) {
            *a += *v as f64;
        }
    }
    acc.iter_mut().for_each(|a| *a /= models.len() as f64);
    Ok(acc)
}

/// Parcellates voxels by their (averaged) regression weights `[N x D]`.
pub fn build_veroi(weights: &[f64], dim: usize, cfg: &VeroiConfig) -> Result<VeroiResult> {
    if dim == 0 || weights.len() % dim != 0 || weights.is_empty() {
        return Err(Error::shape(
            "build_veroi",
            format!("rows of {dim}"),
            weights.len(),
        ));
    }
    if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFinite(format!("head weight {i}")));
    }
    if !(cfg.threshold >= 0.0) {
        return Err(Error::Invalid(
            "veROI threshold must be non-negative".into(),
        ));
    }
    let n = weights.len() / dim;
    let km = kmeans_euclid(weights, dim, cfg.k_for(n), cfg.seed, cfg.max_iter)?;
    let dendrogram = if km.sizes.len() >= 2 {
        ward_linkage(&km.centroids, dim, &km.sizes)?
    } else {
        Dendrogram {
            leaves: 1,
            merges: Vec::new(),
        }
    };
    let leaf_labels = cut_dendrogram(&dendrogram, cfg.threshold);
    // renumber by first voxel so labels read in table order
    let mut remap = vec![usize::MAX; leaf_labels.len()];
    let mut next = 0;
    let labels = km
        .labels
        .iter()
        .map(|&c| {
            let l = leaf_labels[c];
            if remap[l] == usize::MAX {
                remap[l] = next;
                next += 1;
            }
            remap[l]
        })
        .collect();
    Ok(VeroiResult {
        labels,
        n_rois: next,
        dendrogram,
        clusters: km.labels,
    })
}
