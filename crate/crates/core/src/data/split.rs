//! Seeded train/val/test partition of image ids.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{read_json, write_json};
use crate::error::{Error, Result};
use crate::numcore::SeededRng;

pub const SPLIT_FILE: &str = "split.json";
pub const DEFAULT_RATIO: [u32; 3] = [90, 6, 4];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub seed: u64,
    pub ratio: [u32; 3],
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    /// Checks disjointness and that the union is exactly `all`.
    pub fn validate_against(&self, all: &[String]) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id.as_str()) {
                return Err(Error::Invalid(format!(
                    "image `{id}` appears in more than one split"
                )));
            }
        }
        let all_set: HashSet<&str> = all.iter().map(|s| s.as_str()).collect();
        if seen != all_set {
            return Err(Error::Invalid(
                "split does not cover exactly the image set".into(),
            ));
        }
        Ok(())
    }

    /// Row indices into `order` for (train, val, test).
    pub fn indices(&self, order: &[String]) -> Result<[Vec<usize>; 3]> {
        let find = |ids: &[String]| -> Result<Vec<usize>> {
            ids.iter()
                .map(|id| {
                    order.iter().position(|x| x == id).ok_or_else(|| {
                        Error::Invalid(format!("split image `{id}` not in feature store"))
                    })
                })
                .collect()
        };
        Ok([find(&self.train)?, find(&self.val)?, find(&self.test)?])
    }
}

/// Shuffles by seed, then cuts contiguous slices. Val and test get
/// `round(n·r/Σr)` images each; the remainder goes to train.
pub fn split_dataset(image_ids: &[String], ratio: [u32; 3], seed: u64) -> Result<SplitSpec> {
    let n = image_ids.len();
    if n < 3 {
        return Err(Error::Invalid(format!(
            "need at least 3 images to split, got {n}"
        )));
    }
    let total: u32 = ratio.iter().sum();
    if total == 0 {
        return Err(Error::Invalid("split ratio sums to zero".into()));
    }
    let share = |r: u32| (n as f64 * r as f64 / total as f64).round() as usize;
    let n_val = share(ratio[1]);
    let n_test = share(ratio[2]).min(n - n_val);
    let n_train = n - n_val - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(seed).shuffle(&mut order);
    let pick = |r: &[usize]| r.iter().map(|&i| image_ids[i].clone()).collect::<Vec<_>>();
    Ok(SplitSpec {
        seed,
        ratio,
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}

pub fn write_split(split: &SplitSpec, path: &Path) -> Result<()> {
    write_json(path, split)
}

pub fn read_split(path: &Path) -> Result<SplitSpec> {
    read_json(path)
}
