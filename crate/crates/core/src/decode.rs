//! Decoding by retrieval: candidates are ranked by how well the encoder's
//! prediction for each one correlates with a measured response pattern.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::FeatureStore;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::evalkit::pearson_per_voxel;

/// Default candidate-set size.
pub const DEFAULT_CANDIDATES: usize = 500;
/// Smallest voxel subset a correlation is computed over.
pub const MIN_SUBSET: usize = 2;

/// Frozen-model predictions for every candidate over one voxel subset.
#[derive(Clone, Debug)]
pub struct CandidateSet {
    pub ids: Vec<String>,
    pub voxels: Vec<usize>,
    /// `[candidates x voxels]`
    pub pred: Vec<f32>,
}

impl CandidateSet {
    /// Runs every candidate image through the model (σ = 0).
    pub fn predict(
        model: &EncoderModel<f32>,
        store: &FeatureStore,
        images: &[usize],
        coords: &[[f32; 3]],
        voxels: &[usize],
    ) -> Result<Self> {
        check_subset(voxels)?;
        Ok(Self {
            ids: images.iter().map(|&i| store.image_ids[i].clone()).collect(),
            voxels: voxels.to_vec(),
            pred: model.predict(store, images, coords, voxels)?,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The same candidates restricted to a sub-subset of voxels, given as
    /// positions into `self.voxels`.
    pub fn restrict(&self, positions: &[usize]) -> Result<Self> {
        check_subset(positions)?;
        let w = self.voxels.len();
        if let Some(&bad) = positions.iter().find(|&&p| p >= w) {
            return Err(Error::Invalid(format!(
                "subset position {bad} out of range ({w} voxels)"
            )));
        }
        Ok(Self {
            ids: self.ids.clone(),
            voxels: positions.iter().map(|&p| self.voxels[p]).collect(),
            pred: self
                .pred
                .chunks(w)
                .flat_map(|row| positions.iter().map(move |&p| row[p]))
                .collect(),
        })
    }
}

fn check_subset(voxels: &[usize]) -> Result<()> {
    if voxels.len() < MIN_SUBSET {
        return Err(Error::Invalid(format!(
            "retrieval needs at least {MIN_SUBSET} voxels, got {}",
            voxels.len()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub candidate: usize,
    pub id: String,
    pub score: f64,
    /// Prediction or query constant over the subset; scored 0.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Candidates by descending score; ties keep candidate order.
    pub ranking: Vec<Ranked>,
    /// 1-based rank of the true candidate, when known.
    pub true_rank: Option<usize>,
}

/// Ranks all candidates against one query pattern `y_query` (one value per
/// voxel of the candidate set).
pub fn rank_candidates(
    set: &CandidateSet,
    y_query: &[f32],
    truth: Option<usize>,
) -> Result<RetrievalResult> {
    let w = set.voxels.len();
    check_subset(&set.voxels)?;
    if y_query.len() != w {
        return Err(Error::shape("rank_candidates", w, y_query.len()));
    }
    if let Some(t) = truth.filter(|&t| t >= set.len()) {
        return Err(Error::Invalid(format!(
            "true candidate {t} out of range ({} candidates)",
            set.len()
        )));
    }
    // one column per candidate: transpose into [voxels x candidates]
    let c = set.len();
    let mut pred_t = vec![0.0f32; w * c];
    let mut query = vec![0.0f32; w * c];
    for j in 0..c {
        for k in 0..w {
            pred_t[k * c + j] = set.pred[j * w + k];
            query[k * c + j] = y_query[k];
        }
    }
    let corr = pearson_per_voxel(&pred_t, &query, w, c)?;
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| corr.r[b].total_cmp(&corr.r[a]).then(a.cmp(&b)));
    let true_rank = truth.map(|t| {
        order
            .iter()
            .position(|&j| j == t)
            .expect("candidate present")
            + 1
    });
    Ok(RetrievalResult {
        ranking: order
            .into_iter()
            .map(|j| Ranked {
                candidate: j,
                id: set.ids[j].clone(),
                score: corr.r[j],
                degenerate: corr.degenerate[j],
            })
            .collect(),
        true_rank,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    pub queries: usize,
    pub top1: f64,
    pub top5: f64,
    pub mrr: f64,
}

/// Top-1/top-5 accuracy and mean reciprocal rank over queries with a
/// known true candidate.
pub fn retrieval_metrics(results: &[RetrievalResult]) -> RetrievalSummary {
    let ranks: Vec<usize> = results.iter().filter_map(|r| r.true_rank).collect();
    if ranks.is_empty() {
        return RetrievalSummary::default();
    }
    let n = ranks.len() as f64;
    RetrievalSummary {
        queries: ranks.len(),
        top1: ranks.iter().filter(|&&r| r == 1).count() as f64 / n,
        top5: ranks.iter().filter(|&&r| r <= 5).count() as f64 / n,
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
    }
}

/// Summaries for the full voxel set and for each named subset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeReport {
    pub all: RetrievalSummary,
    pub per_roi: BTreeMap<String, RetrievalSummary>,
}

/// Retrieves every query `q` (a row of `queries`, `[queries x set.voxels]`)
/// whose true candidate is `truth[q]`.
pub fn retrieve_all(
    set: &CandidateSet,
    queries: &[f32],
    truth: &[usize],
) -> Result<Vec<RetrievalResult>> {
    let w = set.voxels.len();
    if queries.len() != truth.len() * w {
        return Err(Error::shape("retrieve_all", truth.len() * w, queries.len()));
    }
    queries
        .chunks(w)
        .zip(truth)
        .map(|(q, &t)| rank_candidates(set, q, Some(t)))
        .collect()
}

/// Runs retrieval over the whole candidate set and over each group of
/// voxel positions (ROI-conditioned decoding).
pub fn decode_report(
    set: &CandidateSet,
    queries: &[f32],
    truth: &[usize],
    groups: &[(String, Vec<usize>)],
) -> Result<DecodeReport> {
    let w = set.voxels.len();
    let mut report = DecodeReport {
        all: retrieval_metrics(&retrieve_all(set, queries, truth)?),
        ..DecodeReport::default()
    };
    for (name, positions) in groups {
        let sub = set.restrict(positions)?;
        let q: Vec<f32> = queries
            .chunks(w)
            .flat_map(|row| positions.iter().map(move |&p| row[p]))
            .collect();
        report.per_roi.insert(
            name.clone(),
            retrieval_metrics(&retrieve_all(&sub, &q, truth)?),
        );
    }
    Ok(report)
}
