//! Principal components by SVD of the centred data.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A fitted projection: `z = (x - mean) · basisᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// `[components x dim]`, orthonormal rows.
    pub basis: Vec<f64>,
    /// Singular values of the centred data, descending.
    pub singular_values: Vec<f64>,
    /// Fraction of total variance per component.
    pub explained: Vec<f64>,
}

impl Pca {
    pub fn n_components(&self) -> usize {
        self.singular_values.len()
    }

    /// Projects row-major `[n x dim]` data to `[n x components]`.
    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() % self.dim != 0 {
            return Err(Error::shape(
                "pca_transform",
                format!("rows of {}", self.dim),
                x.len(),
            ));
        }
        let c = self.n_components();
        let mut out = Vec::with_capacity(x.len() / self.dim * c);
        let mut centred = vec![0.0; self.dim];
        for row in x.chunks(self.dim) {
            for (k, v) in centred.iter_mut().enumerate() {
                *v = row[k] - self.mean[k];
            }
            for b in self.basis.chunks(self.dim) {
                out.push(b.iter().zip(&centred).map(|(a, b)| a * b).sum());
            }
        }
        Ok(out)
    }

    /// Maps `[n x components]` scores back to data space.
    pub fn inverse_transform(&self, z: &[f64]) -> Vec<f64> {
        let c = self.n_components();
        let mut out = Vec::with_capacity(z.len() / c.max(1) * self.dim);
        for row in z.chunks(c) {
            let mut x = self.mean.clone();
            for (s, b) in row.iter().zip(self.basis.chunks(self.dim)) {
                for (xv, bv) in x.iter_mut().zip(b) {
                    *xv += s * bv;
                }
            }
            out.extend(x);
        }
        out
    }
}

/// Fits `n_components` principal axes to row-major `[n x dim]` data.
/// Each axis is signed so that its largest-magnitude loading is positive.
pub fn pca_fit(x: &[f64], dim: usize, n_components: usize) -> Result<Pca> {
    if dim == 0 || x.len() % dim != 0 {
        return Err(Error::shape("pca_fit", format!("rows of {dim}"), x.len()));
    }
    let n = x.len() / dim;
    if n < 2 {
        return Err(Error::Invalid(format!(
            "PCA needs at least 2 rows, got {n}"
        )));
    }
    if n_components == 0 || n_components > n.min(dim) {
        return Err(Error::Invalid(format!(
            "{n_components} components requested from {n} rows of dimension {dim}"
        )));
    }
    let mut mean = vec![0.0; dim];
    for row in x.chunks(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred = DMatrix::from_fn(n, dim, |i, j| x[i * dim + j] - mean[j]);
    let svd = centred.svd(false, true);
    let vt = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let mut basis = Vec::with_capacity(n_components * dim);
    let mut singular_values = Vec::with_capacity(n_components);
    for &k in order.iter().take(n_components) {
        let mut row: Vec<f64> = vt.row(k).iter().copied().collect();
        let lead = row
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if lead < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        basis.extend(row);
        singular_values.push(svd.singular_values[k]);
    }
    let explained = singular_values
        .iter()
        .map(|s| if total > 0.0 { s * s / total } else { 0.0 })
        .collect();
    Ok(Pca {
        dim,
        mean,
        basis,
        singular_values,
        explained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::SeededRng;

    fn random(n: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = SeededRng::new(seed);
        (0..n * d).map(|_| rng.normal()).collect()
    }

    #[test]
    fn points_on_a_line_need_one_component() {
        let x: Vec<f64> = (0..10)
            .flat_map(|i| [i as f64, 2.0 * i as f64 + 1.0])
            .collect();
        let p = pca_fit(&x, 2, 2).unwrap();
        assert!((p.explained[0] - 1.0).abs() < 1e-12);
        let expect = [1.0 / 5f64.sqrt(), 2.0 / 5f64.sqrt()];
        assert!((p.basis[0] - expect[0]).abs() < 1e-12 && (p.basis[1] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn mean_row_maps_to_zero() {
        let x = random(12, 5, 1);
        let p = pca_fit(&x, 5, 3).unwrap();
        assert!(p
            .transform(&p.mean)
            .unwrap()
            .iter()
            .all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn full_reconstruction_is_exact() {
        for (n, d) in [(20, 6), (5, 9)] {
            let x = random(n, d, n as u64);
            let p = pca_fit(&x, d, n.min(d) - usize::from(n <= d)).unwrap();
            let back = p.inverse_transform(&p.transform(&x).unwrap());
            let err = x
                .iter()
                .zip(&back)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-4, "{n}x{d}: {err}");
        }
    }

    #[test]
    fn components_are_ordered_orthonormal_and_signed() {
        let d = 7;
        let x = random(30, d, 4);
        let p = pca_fit(&x, d, 5).unwrap();
        assert!(p.singular_values.windows(2).all(|w| w[0] >= w[1]));
        for a in 0..5 {
            let ra = &p.basis[a * d..(a + 1) * d];
            let lead = ra
                .iter()
                .copied()
                .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            assert!(lead > 0.0);
            for b in 0..5 {
                let dot: f64 = ra
                    .iter()
                    .zip(&p.basis[b * d..(b + 1) * d])
                    .map(|(u, v)| u * v)
                    .sum();
                assert!((dot - f64::from(u8::from(a == b))).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn too_many_components_is_an_error() {
        assert!(pca_fit(&random(4, 3, 0), 3, 4).is_err());
        assert!(pca_fit(&random(1, 3, 0), 3, 1).is_err());
    }
}
