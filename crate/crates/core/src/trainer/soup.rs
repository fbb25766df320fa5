//! Top-k checkpoint pool and greedy parameter averaging over it.

use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Best-first snapshots with their validation scores.
#[derive(Clone, Debug)]
pub struct CheckpointPool<T> {
    capacity: usize,
    entries: Vec<(EncoderModel<T>, f64)>,
}

impl<T: Scalar> CheckpointPool<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: Vec::new(),
        }
    }

    /// Inserts a snapshot if it ranks within capacity. Ties keep the earlier
    /// snapshot ahead.
    pub fn offer(&mut self, model: &EncoderModel<T>, score: f64) -> bool {
        let at = self.entries.partition_point(|(_, s)| *s >= score);
        if at >= self.capacity {
            return false;
        }
        self.entries.insert(at, (model.clone(), score));
        self.entries.truncate(self.capacity);
        true
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn best(&self) -> Option<(&EncoderModel<T>, f64)> {
        self.entries.first().map(|(m, s)| (m, *s))
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.1).collect()
    }

    pub fn entries(&self) -> &[(EncoderModel<T>, f64)] {
        &self.entries
    }
}

#[derive(Clone, Debug)]
pub struct SoupOutcome<T> {
    pub model: EncoderModel<T>,
    pub score: f64,
    /// Score of the best single checkpoint under the same `val_fn`.
    pub best_single: f64,
    /// Pool ranks averaged into the soup.
    pub members: Vec<usize>,
}

/// Uniform parameter average of the given pool entries.
fn average<T: Scalar>(pool: &CheckpointPool<T>, members: &[usize]) -> EncoderModel<T> {
    let mut out = pool.entries[members[0]].0.clone();
    let inv = 1.0 / members.len() as f64;
    let sources: Vec<Vec<_>> = members
        .iter()
        .map(|&m| pool.entries[m].0.params())
        .collect();
    for (pi, p) in out.params_mut().into_iter().enumerate() {
        for (k, v) in p.value.data_mut().iter_mut().enumerate() {
            let s: f64 = sources
                .iter()
                .map(|ps| ps[pi].value.data()[k].to_f64_lossless())
                .sum();
            *v = T::of(s * inv);
        }
    }
    out
}

/// Starts from the best snapshot and tries each further one in rank order,
/// keeping it in the average only if `val_fn` does not drop.
pub fn greedy_soup<T: Scalar>(
    pool: &CheckpointPool<T>,
    val_fn: &mut dyn FnMut(&EncoderModel<T>) -> Result<f64>,
) -> Result<SoupOutcome<T>> {
    let Some((best, _)) = pool.best() else {
        return Err(Error::Invalid("greedy soup over an empty pool".into()));
    };
    let best_single = val_fn(best)?;
    let mut members = vec![0];
    let mut model = best.clone();
    let mut score = best_single;
    for cand in 1..pool.len() {
        let mut trial = members.clone();
        trial.push(cand);
        let soup = average(pool, &trial);
        let s = val_fn(&soup)?;
        if s >= score {
            members = trial;
            model = soup;
            score = s;
        }
    }
    debug_assert!(score >= best_single);
    Ok(SoupOutcome {
        model,
        score,
        best_single,
        members,
    })
}
