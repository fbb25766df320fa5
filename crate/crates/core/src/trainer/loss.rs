//! Composite objective: smooth L1 against ground truth on supervised
//! voxels, smooth L1 against a teacher on distilled voxels, and negative
//! entropy of the layer weights.

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::numcore::{neg_entropy, smooth_l1_elem, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub gt_loss: f64,
    pub dk_loss: f64,
    pub ent_loss: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn combine(gt: f64, dk: f64, ent: f64, lambda_dk: f64, lambda_ent: f64) -> Self {
        Self {
            gt_loss: gt,
            dk_loss: dk,
            ent_loss: ent,
            total: gt + lambda_dk * dk + lambda_ent * ent,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.gt_loss, self.dk_loss, self.ent_loss, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub(crate) fn add_scaled(&mut self, o: &LossTerms, s: f64) {
        self.gt_loss += s * o.gt_loss;
        self.dk_loss += s * o.dk_loss;
        self.ent_loss += s * o.ent_loss;
        self.total += s * o.total;
    }
}

/// Normalisers for a batch: the number of ground-truth and teacher targets
/// across all of its datapoints.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LossNorm {
    pub gt: usize,
    pub dk: usize,
}

/// Adds one datapoint's share of the two regression terms to `(gt, dk)`
/// and writes the prediction gradient (including `λ_dk`) into `dpred`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn regression_terms<T: Scalar>(
    pred: &[T],
    y: &[f32],
    teacher: Option<&[f32]>,
    gt_mask: &[bool],
    dk_mask: &[bool],
    norm: LossNorm,
    cfg: &TrainConfig,
    sums: &mut (f64, f64),
    dpred: &mut [T],
) -> Result<()> {
    let beta = T::of(cfg.beta_smoothl1 as f64);
    let lambda_dk = T::of(cfg.lambda_dk as f64);
    let inv_gt = T::one() / T::of(norm.gt.max(1) as f64);
    let inv_dk = T::one() / T::of(norm.dk.max(1) as f64);
    for k in 0..pred.len() {
        let mut g = T::zero();
        if gt_mask[k] {
            let (v, s) = smooth_l1_elem(pred[k] - T::of(y[k] as f64), beta);
            sums.0 += v / norm.gt as f64;
            g += s * inv_gt;
        }
        if dk_mask[k] {
            let t = teacher.ok_or_else(|| {
                Error::Invalid("distillation targets requested but no teacher given".into())
            })?;
            let (v, s) = smooth_l1_elem(pred[k] - T::of(t[k] as f64), beta);
            sums.1 += v / norm.dk as f64;
            g += lambda_dk * s * inv_dk;
        }
        dpred[k] = g;
    }
    Ok(())
}

/// Loss gradients returned by [`compute_loss`].
#[derive(Clone, Debug)]
pub struct LossGrads<T> {
    pub dpred: Vec<T>,
    pub deta: Option<Tensor<T>>,
}

/// Loss over one set of predictions. `eta` (`[V x L]`, omitted when the
/// selector is frozen) feeds the entropy term.
pub fn compute_loss<T: Scalar>(
    pred: &[T],
    y: &[f32],
    eta: Option<&Tensor<T>>,
    teacher: Option<&[f32]>,
    gt_mask: &[bool],
    dk_mask: &[bool],
    cfg: &TrainConfig,
) -> Result<(LossTerms, LossGrads<T>)> {
    let n = pred.len();
    if y.len() != n
        || gt_mask.len() != n
        || dk_mask.len() != n
        || teacher.is_some_and(|t| t.len() != n)
    {
        return Err(Error::shape(
            "compute_loss",
            n,
            "mismatched target or mask length",
        ));
    }
    let norm = LossNorm {
        gt: gt_mask.iter().filter(|m| **m).count(),
        dk: dk_mask.iter().filter(|m| **m).count(),
    };
    let mut sums = (0.0, 0.0);
    let mut dpred = vec![T::zero(); n];
    regression_terms(
        pred, y, teacher, gt_mask, dk_mask, norm, cfg, &mut sums, &mut dpred,
    )?;
    let (ent, deta) = match eta {
        Some(e) => {
            let (v, mut g) = neg_entropy(e);
            g.scale(T::of(cfg.lambda_ent as f64));
            (v, Some(g))
        }
        None => (0.0, None),
    };
    let terms = LossTerms::combine(
        sums.0,
        sums.1,
        ent,
        cfg.lambda_dk as f64,
        cfg.lambda_ent as f64,
    );
    Ok((terms, LossGrads { dpred, deta }))
}
