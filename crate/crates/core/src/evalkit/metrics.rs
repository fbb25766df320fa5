//! Per-voxel correlation scores and noise normalisation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column-wise Pearson r. A column whose prediction or target has no
/// variance scores 0 and is flagged.
#[derive(Clone, Debug, PartialEq)]
pub struct Correlations {
    pub r: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl Correlations {
    pub fn mean(&self) -> f64 {
        mean(&self.r)
    }
}

/// Pearson r per column of two row-major `[rows x cols]` matrices, with
/// two-pass f64 accumulation.
pub fn pearson_per_voxel<P, Q>(
    pred: &[P],
    y: &[Q],
    rows: usize,
    cols: usize,
) -> Result<Correlations>
where
    P: Copy + Into<f64>,
    Q: Copy + Into<f64>,
{
    if rows < 2 {
        return Err(Error::Invalid(format!(
            "Pearson r needs at least 2 rows, got {rows}"
        )));
    }
    if pred.len() != rows * cols || y.len() != rows * cols {
        return Err(Error::shape(
            "pearson_per_voxel",
            rows * cols,
            format!("{} and {}", pred.len(), y.len()),
        ));
    }
    let mut mp = vec![0.0f64; cols];
    let mut my = vec![0.0f64; cols];
    for i in 0..rows {
        for j in 0..cols {
            mp[j] += pred[i * cols + j].into();
            my[j] += y[i * cols + j].into();
        }
    }
    for j in 0..cols {
        mp[j] /= rows as f64;
        my[j] /= rows as f64;
    }
    let mut sxy = vec![0.0f64; cols];
    let mut sxx = vec![0.0f64; cols];
    let mut syy = vec![0.0f64; cols];
    for i in 0..rows {
        for j in 0..cols {
            let a = pred[i * cols + j].into() - mp[j];
            let b = y[i * cols + j].into() - my[j];
            sxy[j] += a * b;
            sxx[j] += a * a;
            syy[j] += b * b;
        }
    }
    let mut r = vec![0.0; cols];
    let mut degenerate = vec![false; cols];
    for j in 0..cols {
        if sxx[j] <= f64::MIN_POSITIVE || syy[j] <= f64::MIN_POSITIVE {
            degenerate[j] = true;
        } else {
            r[j] = (sxy[j] / (sxx[j].sqrt() * syy[j].sqrt())).clamp(-1.0, 1.0);
        }
    }
    Ok(Correlations { r, degenerate })
}

/// Pearson r of two equal-length vectors; `None` when either is constant.
pub fn pearson<P: Copy + Into<f64>, Q: Copy + Into<f64>>(a: &[P], b: &[Q]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let c = pearson_per_voxel(a, b, a.len(), 1).ok()?;
    (!c.degenerate[0]).then_some(c.r[0])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormConvention {
    /// `r / ceiling`
    #[default]
    Ratio,
    /// `r² / ceiling²`, sign-preserving
    Squared,
}

/// Ceilings below this are too noisy to normalise by.
pub const MIN_CEILING: f64 = 0.05;

/// Noise-normalised scores; `None` marks voxels excluded for a ceiling
/// below [`MIN_CEILING`].
pub fn noise_normalized(
    r: &[f64],
    ceilings: &[f64],
    convention: NormConvention,
) -> Result<Vec<Option<f64>>> {
    if ceilings.len() != r.len() {
        return Err(Error::Invalid(format!(
            "noise normalisation needs one ceiling per voxel ({} scores, {} ceilings)",
            r.len(),
            ceilings.len()
        )));
    }
    Ok(r.iter()
        .zip(ceilings)
        .map(|(&r, &c)| {
            if !(c >= MIN_CEILING) {
                return None;
            }
            let v = match convention {
                NormConvention::Ratio => r / c,
                NormConvention::Squared => r.signum() * (r * r) / (c * c),
            };
            Some(v.clamp(-1.0, 1.5))
        })
        .collect())
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Median (mean of the middle pair for even lengths); 0 for an empty slice.
pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
