//! Lloyd's k-means with k-means++ seeding.

use crate::error::{Error, Result};
use crate::numcore::SeededRng;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    /// `[k x dim]`, row-major.
    pub centroids: Vec<f64>,
    pub sizes: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid (lowest index on ties).
fn nearest(x: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Clusters the rows of `x` (`[n x dim]`). Empty clusters are re-seeded from
/// the point farthest from its centroid.
pub fn kmeans_euclid(
    x: &[f64],
    dim: usize,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<KMeans> {
    if dim == 0 || x.len() % dim != 0 {
        return Err(Error::shape("kmeans", format!("rows of {dim}"), x.len()));
    }
    let n = x.len() / dim;
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("k-means: k = {k} with {n} items")));
    }
    let row = |i: usize| &x[i * dim..(i + 1) * dim];
    let mut rng = SeededRng::new(seed);

    // k-means++: first centre uniform, then proportional to squared distance
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.below(n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.uniform() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    chosen = i;
                    break;
                }
                t -= d;
            }
            chosen
        } else {
            rng.below(n)
        };
        let c = row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &c));
        }
        centroids.extend_from_slice(&c);
    }

    let mut labels = vec![usize::MAX; n];
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (c, d) = nearest(row(i), &centroids, dim);
            dists[i] = d;
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i] * dim..][..dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed from the point worst served by its current centroid
                let far = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("more items than clusters");
                counts[labels[far]] -= 1;
                for (s, v) in sums[labels[far] * dim..][..dim].iter_mut().zip(row(far)) {
                    *s -= v;
                }
                labels[far] = c;
                dists[far] = 0.0;
                counts[c] = 1;
                sums[c * dim..][..dim].copy_from_slice(row(far));
                changed = true;
            }
        }
        for c in 0..k {
            for j in 0..dim {
                centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
            }
        }
        if !changed || iterations >= max_iter {
            let inertia = (0..n)
                .map(|i| sq_dist(row(i), &centroids[labels[i] * dim..][..dim]))
                .sum();
            return Ok(KMeans {
                labels,
                centroids,
                sizes: counts,
                inertia,
                iterations,
            });
        }
    }
}
