//! Linear probing: frozen features, PCA fitted on the training images,
//! and a closed-form ridge readout per voxel.

use nalgebra::DMatrix;

use super::metrics::{pearson_per_voxel, Correlations};
use super::pca::{pca_fit, Pca};
use crate::data::FeatureStore;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Smallest ridge ever used; a singular system falls back to it.
pub const MIN_RIDGE: f64 = 1e-6;
/// Default ridge as a fraction of the mean PCA-score variance (trace / c).
pub const DEFAULT_RIDGE_SCALE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub pca: Pca,
    pub ridge: f64,
    /// Test-split correlations per voxel.
    pub scores: Correlations,
}

/// Flattened features `[images x dim]` in row order.
pub struct FeatureMatrix<'a> {
    pub values: &'a [f64],
    pub dim: usize,
}

/// Fits PCA and a ridge readout on `train`, scores Pearson r on `test`.
/// `responses` is `[images x voxels]`, row-aligned with `features`.
pub fn linear_probe(
    features: FeatureMatrix<'_>,
    responses: &[f32],
    n_voxels: usize,
    train: &[usize],
    test: &[usize],
    n_components: usize,
    ridge: Option<f64>,
) -> Result<ProbeResult> {
    let dim = features.dim;
    let n_images = features.values.len() / dim.max(1);
    if responses.len() != n_images * n_voxels {
        return Err(Error::shape(
            "linear_probe",
            n_images * n_voxels,
            responses.len(),
        ));
    }
    if let Some(&bad) = train.iter().chain(test).find(|&&i| i >= n_images) {
        return Err(Error::Invalid(format!(
            "image index {bad} out of range ({n_images} images)"
        )));
    }
    let rows = |idx: &[usize]| -> Vec<f64> {
        idx.iter()
            .flat_map(|&i| features.values[i * dim..(i + 1) * dim].iter().copied())
            .collect()
    };
    let pca = pca_fit(&rows(train), dim, n_components)?;
    let c = pca.n_components();
    let z_train = pca.transform(&rows(train))?;
    let z_test = pca.transform(&rows(test))?;

    let z = DMatrix::from_row_slice(train.len(), c, &z_train);
    let mut y_mean = vec![0.0f64; n_voxels];
    for &i in train {
        for (m, &v) in y_mean
            .iter_mut()
            .zip(&responses[i * n_voxels..(i + 1) * n_voxels])
        {
            *m += v as f64;
        }
    }
    y_mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let y = DMatrix::from_fn(train.len(), n_voxels, |r, v| {
        responses[train[r] * n_voxels + v] as f64 - y_mean[v]
    });

    let gram = z.transpose() * &z;
    let rhs = z.transpose() * y;
    let mut lambda = match ridge {
        Some(l) => l,
        None => DEFAULT_RIDGE_SCALE * gram.trace() / c as f64,
    };
    // PCA scores are uncorrelated, so the Gram matrix is diag(s²)
    let sv = &pca.singular_values;
    let singular = sv[c - 1] <= 1e-9 * sv[0];
    if lambda < MIN_RIDGE && singular {
        log::warn!("probe: normal equations are singular at ridge {lambda:e}; using {MIN_RIDGE:e}");
        lambda = MIN_RIDGE;
    }
    let system = &gram + DMatrix::identity(c, c) * lambda;
    let weights = system
        .cholesky()
        .ok_or_else(|| {
            Error::NonFinite(format!(
                "probe: ridge system not positive definite at {lambda:e}"
            ))
        })?
        .solve(&rhs);

    let zt = DMatrix::from_row_slice(test.len(), c, &z_test);
    let mut pred = zt * weights;
    for (v, m) in y_mean.iter().enumerate() {
        pred.column_mut(v).add_scalar_mut(*m);
    }
    let pred_rows: Vec<f64> = (0..test.len())
        .flat_map(|r| pred.row(r).iter().copied().collect::<Vec<_>>())
        .collect();
    let y_test: Vec<f32> = test
        .iter()
        .flat_map(|&i| responses[i * n_voxels..(i + 1) * n_voxels].iter().copied())
        .collect();
    let scores = pearson_per_voxel(&pred_rows, &y_test, test.len(), n_voxels)?;
    Ok(ProbeResult {
        pca,
        ridge: lambda,
        scores,
    })
}

/// Raw backbone grids flattened per image.
pub fn raw_features(store: &FeatureStore) -> Vec<f64> {
    (0..store.n_images())
        .flat_map(|i| store.image(i).iter().map(|&v| v as f64))
        .collect()
}

/// A trained model's adapter output (`[L x D x G x G]` per image) flattened
/// per image, for probing the learned feature space.
pub fn adapter_features<T: Scalar>(
    model: &EncoderModel<T>,
    store: &FeatureStore,
) -> Result<(Vec<f64>, usize)> {
    let mut out = Vec::new();
    let mut dim = 0;
    for i in 0..store.n_images() {
        let m = model.image_forward(store.image(i))?.m;
        dim = m.len();
        out.extend(m.data().iter().map(|v| v.to_f64_lossless()));
    }
    Ok((out, dim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::SeededRng;

    fn setup(
        n: usize,
        d: usize,
        v: usize,
        seed: u64,
    ) -> (Vec<f64>, Vec<f32>, Vec<usize>, Vec<usize>) {
        let mut rng = SeededRng::new(seed);
        let x: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
        let w: Vec<f64> = (0..d * v).map(|_| rng.normal()).collect();
        let y: Vec<f32> = (0..n)
            .flat_map(|i| {
                let row = &x[i * d..(i + 1) * d];
                (0..v)
                    .map(|k| (0..d).map(|j| row[j] * w[j * v + k]).sum::<f64>() as f32 + 0.5)
                    .collect::<Vec<_>>()
            })
            .collect();
        let train = (0..n * 3 / 4).collect();
        let test = (n * 3 / 4..n).collect();
        (x, y, train, test)
    }

    #[test]
    fn realizable_targets_are_recovered() {
        let (x, y, train, test) = setup(200, 8, 5, 0);
        let p = linear_probe(
            FeatureMatrix { values: &x, dim: 8 },
            &y,
            5,
            &train,
            &test,
            8,
            None,
        )
        .unwrap();
        assert!(p.scores.r.iter().all(|&r| r > 0.99), "{:?}", p.scores.r);
    }

    #[test]
    fn permuted_targets_score_near_zero() {
        let (x, y, train, test) = setup(400, 8, 40, 1);
        let v = 40;
        let mut order: Vec<usize> = (0..400).collect();
        SeededRng::new(9).shuffle(&mut order);
        let shuffled: Vec<f32> = order
            .iter()
            .flat_map(|&i| y[i * v..(i + 1) * v].iter().copied())
            .collect();
        let p = linear_probe(
            FeatureMatrix { values: &x, dim: 8 },
            &shuffled,
            v,
            &train,
            &test,
            8,
            None,
        )
        .unwrap();
        assert!(p.scores.mean().abs() < 0.05, "{}", p.scores.mean());
    }

    #[test]
    fn singular_system_falls_back_to_minimum_ridge() {
        // duplicated feature column: rank-deficient scores when all components are kept
        let (mut x, y, train, test) = setup(50, 4, 2, 2);
        for row in x.chunks_mut(4) {
            row[3] = row[2];
        }
        let p = linear_probe(
            FeatureMatrix { values: &x, dim: 4 },
            &y,
            2,
            &train,
            &test,
            4,
            Some(0.0),
        )
        .unwrap();
        assert_eq!(p.ridge, MIN_RIDGE);
        assert!(p.scores.r.iter().all(|r| r.is_finite()));
    }
}
