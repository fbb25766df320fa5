//! Size-weighted Ward agglomeration and threshold cuts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One agglomeration step. Leaves are `0..k`; the cluster formed by merge
/// `i` gets id `k + i`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    pub size: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub leaves: usize,
    pub merges: Vec<Merge>,
}

/// Ward linkage over weighted points (`[k x dim]` centroids with member
/// counts). Distances follow the usual convention
/// `sqrt(2·n_a·n_b/(n_a+n_b))·‖c_a − c_b‖`, updated by Lance–Williams.
pub fn ward_linkage(centroids: &[f64], dim: usize, sizes: &[usize]) -> Result<Dendrogram> {
    let k = sizes.len();
    if dim == 0 || centroids.len() != k * dim {
        return Err(Error::shape(
            "ward_linkage",
            format!("{k} x {dim}"),
            centroids.len(),
        ));
    }
    if sizes.contains(&0) {
        return Err(Error::Invalid("ward_linkage: zero-sized cluster".into()));
    }
    // squared Ward distances between active clusters, indexed by slot
    let mut d2 = vec![0.0f64; k * k];
    for i in 0..k {
        for j in i + 1..k {
            let (ni, nj) = (sizes[i] as f64, sizes[j] as f64);
            let e: f64 = (0..dim)
                .map(|t| (centroids[i * dim + t] - centroids[j * dim + t]).powi(2))
                .sum();
            let v = 2.0 * ni * nj / (ni + nj) * e;
            d2[i * k + j] = v;
            d2[j * k + i] = v;
        }
    }
    let mut size: Vec<usize> = sizes.to_vec();
    let mut id: Vec<usize> = (0..k).collect();
    let mut alive = vec![true; k];
    let mut merges = Vec::with_capacity(k.saturating_sub(1));
    for step in 0..k.saturating_sub(1) {
        // smallest distance; ties go to the lexicographically smallest id pair
        let mut best: Option<(f64, usize, usize, (usize, usize))> = None;
        for i in 0..k {
            if !alive[i] {
                continue;
            }
            for j in i + 1..k {
                if !alive[j] {
                    continue;
                }
                let key = (id[i].min(id[j]), id[i].max(id[j]));
                let v = d2[i * k + j];
                let better = match best {
                    None => true,
                    Some((bv, _, _, bk)) => v < bv || (v == bv && key < bk),
                };
                if better {
                    best = Some((v, i, j, key));
                }
            }
        }
        let (v, i, j, key) = best.expect("at least two clusters remain");
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        for m in 0..k {
            if !alive[m] || m == i || m == j {
                continue;
            }
            let nm = size[m] as f64;
            let nv =
                ((ni + nm) * d2[m * k + i] + (nj + nm) * d2[m * k + j] - nm * v) / (ni + nj + nm);
            d2[m * k + i] = nv;
            d2[i * k + m] = nv;
        }
        alive[j] = false;
        size[i] += size[j];
        id[i] = k + step;
        merges.push(Merge {
            a: key.0,
            b: key.1,
            distance: v.max(0.0).sqrt(),
            size: size[i],
        });
    }
    Ok(Dendrogram { leaves: k, merges })
}

/// Flat clusters from the merges whose distance is below `threshold`.
/// Labels are numbered by the first leaf of each cluster.
pub fn cut_dendrogram(d: &Dendrogram, threshold: f64) -> Vec<usize> {
    let k = d.leaves;
    let mut parent: Vec<usize> = (0..k + d.merges.len()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (i, m) in d.merges.iter().enumerate() {
        let node = k + i;
        if m.distance < threshold {
            let (ra, rb) = (find(&mut parent, m.a), find(&mut parent, m.b));
            parent[ra] = node;
            parent[rb] = node;
        }
    }
    let mut label_of_root = std::collections::HashMap::new();
    (0..k)
        .map(|leaf| {
            let r = find(&mut parent, leaf);
            let next = label_of_root.len();
            *label_of_root.entry(r).or_insert(next)
        })
        .collect()
}
