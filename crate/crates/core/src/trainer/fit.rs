//! Minibatch training loop with early stopping and a checkpoint pool.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::loss::{regression_terms, LossNorm, LossTerms};
use super::soup::CheckpointPool;
use crate::data::Dataset;
use crate::encoder::{EncoderModel, U_LIMIT};
use crate::error::{Error, Result};
use crate::evalkit::pearson_per_voxel;
use crate::numcore::{adabelief_step, neg_entropy, SeededRng, Tensor};
use crate::scalar::Scalar;

const TRAIN_STREAM: u64 = 0x7472;

/// Which voxels a training stage supervises and how.
#[derive(Clone, Debug)]
pub struct StageRole {
    /// Voxels trained against measured responses.
    pub gt: Vec<bool>,
    /// Voxels trained against teacher predictions.
    pub dk: Vec<bool>,
    /// Teacher predictions `[images x voxels]`, row-aligned with the
    /// dataset's image list. Rows outside train/val are never read.
    pub teacher: Option<Vec<f32>>,
    /// Voxels whose validation score drives early stopping and the pool.
    pub condition: Vec<usize>,
    /// Named voxel groups scored in the log.
    pub groups: Vec<(String, Vec<usize>)>,
}

impl StageRole {
    /// Every voxel supervised and scored; groups from the ROI labels.
    pub fn full(ds: &Dataset) -> Self {
        let n = ds.voxels.len();
        Self {
            gt: vec![true; n],
            dk: vec![false; n],
            teacher: None,
            condition: (0..n).collect(),
            groups: roi_groups(ds),
        }
    }

    /// Ground truth on `target` only, validated on `target`.
    pub fn target_only(ds: &Dataset, target: &[usize]) -> Self {
        let n = ds.voxels.len();
        let mut gt = vec![false; n];
        for &v in target {
            gt[v] = true;
        }
        Self {
            gt,
            dk: vec![false; n],
            teacher: None,
            condition: target.to_vec(),
            groups: roi_groups(ds),
        }
    }

    fn validate(&self, n_voxels: usize, n_images: usize) -> Result<()> {
        if self.gt.len() != n_voxels || self.dk.len() != n_voxels {
            return Err(Error::shape(
                "stage role",
                n_voxels,
                format!("{} / {}", self.gt.len(), self.dk.len()),
            ));
        }
        if self.condition.is_empty() || self.condition.iter().any(|&v| v >= n_voxels) {
            return Err(Error::Invalid(
                "stage role: conditioning voxel set empty or out of range".into(),
            ));
        }
        if self.dk.iter().any(|d| *d) {
            match &self.teacher {
                None => {
                    return Err(Error::Invalid(
                        "stage role: distilled voxels but no teacher predictions".into(),
                    ))
                }
                Some(t) if t.len() != n_images * n_voxels => {
                    return Err(Error::shape(
                        "teacher predictions",
                        n_images * n_voxels,
                        t.len(),
                    ))
                }
                _ => {}
            }
        }
        if !self.gt.iter().zip(&self.dk).any(|(a, b)| *a || *b) {
            return Err(Error::Invalid("stage role supervises no voxel".into()));
        }
        Ok(())
    }

    fn active(&self) -> Vec<usize> {
        (0..self.gt.len())
            .filter(|&v| self.gt[v] || self.dk[v])
            .collect()
    }
}

/// Voxel indices per ROI label, in label order.
pub fn roi_groups(ds: &Dataset) -> Vec<(String, Vec<usize>)> {
    let (names, labels) = ds.voxels.roi_labels();
    names
        .into_iter()
        .enumerate()
        .map(|(k, name)| {
            (
                name,
                (0..labels.len())
                    .filter(|&v| labels[v] == Some(k))
                    .collect(),
            )
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    /// Mean Pearson r over the conditioning voxels.
    pub score: f64,
    pub per_group: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub val_r: f64,
    pub per_roi: BTreeMap<String, f64>,
    /// Mean over the epoch's steps.
    pub loss: LossTerms,
    pub improved: bool,
}

pub fn write_log(records: &[LogRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct FitOutcome<T> {
    pub best: EncoderModel<T>,
    pub best_score: f64,
    pub pool: CheckpointPool<T>,
    pub log: Vec<LogRecord>,
    pub steps: usize,
}

/// One minibatch: image indices and, per image, the voxels it trains.
#[derive(Clone, Debug)]
pub(crate) struct Batch {
    pub images: Vec<usize>,
    pub voxels: Vec<Vec<usize>>,
}

impl Batch {
    fn jitter_len(&self) -> usize {
        self.voxels.iter().map(|v| 2 * v.len()).sum()
    }
}

pub(crate) struct TrainData<'a> {
    pub ds: &'a Dataset,
    pub coords: Vec<[f32; 3]>,
    pub role: &'a StageRole,
}

/// Loss of one batch and, with `backward`, its gradient accumulated into
/// the model. `noise` holds one standard-normal draw per sampled coordinate.
pub(crate) fn batch_objective<T: Scalar>(
    model: &mut EncoderModel<T>,
    data: &TrainData,
    batch: &Batch,
    noise: &[f64],
    cfg: &TrainConfig,
    backward: bool,
) -> Result<LossTerms> {
    let n = model.n_voxels();
    let role = data.role;
    let mc = model.config.clone();
    let (l, d, g) = (mc.layers, mc.out_dim, mc.grid);
    let mut pos = vec![usize::MAX; n];
    let mut union = Vec::new();
    for vs in &batch.voxels {
        for &v in vs {
            if pos[v] == usize::MAX {
                pos[v] = 0;
                union.push(v);
            }
        }
    }
    union.sort_unstable();
    for (i, &v) in union.iter().enumerate() {
        pos[v] = i;
    }
    let ucoords: Vec<[f32; 3]> = union.iter().map(|&v| data.coords[v]).collect();
    let topy = model.topy_forward(&ucoords)?;

    let norm = LossNorm {
        gt: batch
            .voxels
            .iter()
            .flatten()
            .filter(|&&v| role.gt[v])
            .count(),
        dk: batch
            .voxels
            .iter()
            .flatten()
            .filter(|&&v| role.dk[v])
            .count(),
    };
    let sigma = T::of(mc.sigma as f64);
    let lim = T::of(U_LIMIT);
    let mut du_all = vec![T::zero(); union.len() * 2];
    let mut deta_all = vec![T::zero(); union.len() * l];
    let mut sums = (0.0, 0.0);
    let mut noise_at = 0;
    for (&img_idx, vs) in batch.images.iter().zip(&batch.voxels) {
        let k = vs.len();
        let mut u = Vec::with_capacity(2 * k);
        let mut open = Vec::with_capacity(2 * k);
        let mut eta = Vec::with_capacity(k * l);
        for &v in vs {
            let p = pos[v];
            for a in 0..2 {
                let z = topy.u.data()[2 * p + a] + sigma * T::of(noise[noise_at]);
                noise_at += 1;
                open.push(z <= lim && z >= -lim);
                u.push(z.max(-lim).min(lim));
            }
            eta.extend_from_slice(topy.eta.slab(p));
        }
        let img = model.image_forward(data.ds.features.image(img_idx))?;
        let ro = model.readout(&img, &u, &eta, vs);
        let row = data.ds.responses.row(img_idx);
        let y: Vec<f32> = vs.iter().map(|&v| row[v]).collect();
        let teacher: Option<Vec<f32>> = role
            .teacher
            .as_ref()
            .map(|t| vs.iter().map(|&v| t[img_idx * n + v]).collect());
        let gm: Vec<bool> = vs.iter().map(|&v| role.gt[v]).collect();
        let dm_mask: Vec<bool> = vs.iter().map(|&v| role.dk[v]).collect();
        let mut dpred = vec![T::zero(); k];
        regression_terms(
            &ro.pred,
            &y,
            teacher.as_deref(),
            &gm,
            &dm_mask,
            norm,
            cfg,
            &mut sums,
            &mut dpred,
        )?;
        if !backward {
            continue;
        }
        let mut du = vec![T::zero(); 2 * k];
        let mut deta = vec![T::zero(); k * l];
        let mut dm = Tensor::zeros(&[l, d, g, g]);
        let mut dq = Tensor::zeros(&[l, d]);
        model.readout_backward(
            &img, &u, &eta, vs, &ro, &dpred, &mut du, &mut deta, &mut dm, &mut dq,
        );
        model.image_backward(&img, dm, &dq)?;
        for (j, &v) in vs.iter().enumerate() {
            let p = pos[v];
            for a in 0..2 {
                if open[2 * j + a] {
                    du_all[2 * p + a] += du[2 * j + a];
                }
            }
            for li in 0..l {
                deta_all[p * l + li] += deta[j * l + li];
            }
        }
    }

    let selector_live = !model.selector.is_frozen();
    let ent = if selector_live {
        let (v, mut ge) = neg_entropy(&topy.eta);
        if backward && cfg.lambda_ent > 0.0 {
            ge.scale(T::of(cfg.lambda_ent as f64));
            for (a, b) in deta_all.iter_mut().zip(ge.data()) {
                *a += *b;
            }
        }
        v
    } else {
        0.0
    };
    if backward {
        let du = Tensor::from_vec(&[union.len(), 2], du_all)?;
        let deta = Tensor::from_vec(&[union.len(), l], deta_all)?;
        model.topy_backward(&topy, &du, &deta);
    }
    Ok(LossTerms::combine(
        sums.0,
        sums.1,
        ent,
        cfg.lambda_dk as f64,
        cfg.lambda_ent as f64,
    ))
}

/// Scores a model on the validation images (σ = 0).
pub fn validate<T: Scalar>(
    model: &EncoderModel<T>,
    ds: &Dataset,
    images: &[usize],
    role: &StageRole,
) -> Result<Validation> {
    let mut wanted = vec![false; ds.voxels.len()];
    for &v in role
        .condition
        .iter()
        .chain(role.groups.iter().flat_map(|g| g.1.iter()))
    {
        wanted[v] = true;
    }
    let voxels: Vec<usize> = (0..wanted.len()).filter(|&v| wanted[v]).collect();
    let mut col = vec![usize::MAX; wanted.len()];
    for (j, &v) in voxels.iter().enumerate() {
        col[v] = j;
    }
    let coords = ds.voxels.coords();
    let pred: Vec<f64> = model
        .predict(&ds.features, images, &coords, &voxels)?
        .into_iter()
        .map(|v| v.to_f64_lossless())
        .collect();
    let y: Vec<f32> = images
        .iter()
        .flat_map(|&i| voxels.iter().map(move |&v| (i, v)))
        .map(|(i, v)| ds.responses.get(i, v))
        .collect();
    let r = pearson_per_voxel(&pred, &y, images.len(), voxels.len())?.r;
    let mean_of =
        |set: &[usize]| set.iter().map(|&v| r[col[v]]).sum::<f64>() / set.len().max(1) as f64;
    Ok(Validation {
        score: mean_of(&role.condition),
        per_group: role
            .groups
            .iter()
            .filter(|g| !g.1.is_empty())
            .map(|(name, set)| (name.clone(), mean_of(set)))
            .collect(),
    })
}

/// Trains until the conditioning score stops improving.
pub fn fit<T: Scalar>(
    model: EncoderModel<T>,
    ds: &Dataset,
    cfg: &TrainConfig,
    role: &StageRole,
) -> Result<FitOutcome<T>> {
    let [_, val, _] = ds.split_indices()?;
    fit_with_validator(model, ds, cfg, role, &mut |m: &EncoderModel<T>| {
        validate(m, ds, &val, role)
    })
}

/// [`fit`] with a caller-supplied validation function.
pub fn fit_with_validator<T: Scalar>(
    mut model: EncoderModel<T>,
    ds: &Dataset,
    cfg: &TrainConfig,
    role: &StageRole,
    validator: &mut dyn FnMut(&EncoderModel<T>) -> Result<Validation>,
) -> Result<FitOutcome<T>> {
    cfg.validate()?;
    let n = ds.voxels.len();
    if model.n_voxels() != n {
        return Err(Error::shape(
            "fit",
            format!("{n} voxel heads"),
            model.n_voxels(),
        ));
    }
    role.validate(n, ds.features.n_images())?;
    let [train, val, _] = ds.split_indices()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid(
            "training needs non-empty train and validation splits".into(),
        ));
    }
    let data = TrainData {
        ds,
        coords: ds.voxels.coords(),
        role,
    };
    let active = role.active();
    let cap = cfg.voxel_cap.min(active.len());
    let opt = cfg.optimizer();
    let mut rng = SeededRng::derive(cfg.seed, &[TRAIN_STREAM]);
    let steps_per_epoch = cfg.steps_per_epoch(train.len());

    let mut order = train.clone();
    rng.shuffle(&mut order);
    let mut cursor = 0;
    let mut pool = CheckpointPool::new(cfg.soup_top_k);
    let mut log = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut step = 0;
    model.zero_grad();
    for epoch in 0..cfg.max_epochs {
        let mut epoch_terms = LossTerms::default();
        for _ in 0..steps_per_epoch {
            let mut images = Vec::with_capacity(cfg.batch);
            while images.len() < cfg.batch.min(train.len()) {
                if cursor == order.len() {
                    rng.shuffle(&mut order);
                    cursor = 0;
                }
                images.push(order[cursor]);
                cursor += 1;
            }
            let voxels = images
                .iter()
                .map(|_| draw_voxels(&active, cap, &mut rng))
                .collect();
            let batch = Batch { images, voxels };
            let noise: Vec<f64> = (0..batch.jitter_len()).map(|_| rng.normal()).collect();
            let terms = batch_objective(&mut model, &data, &batch, &noise, cfg, true)?;
            if !terms.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at step {step} (epoch {epoch}): gt {} dk {} ent {}",
                    terms.gt_loss, terms.dk_loss, terms.ent_loss
                )));
            }
            adabelief_step(model.params_mut(), &opt)
                .map_err(|e| Error::NonFinite(format!("step {step} (epoch {epoch}): {e}")))?;
            model.zero_grad();
            epoch_terms.add_scaled(&terms, 1.0 / steps_per_epoch as f64);
            step += 1;
        }
        let v = validator(&model)?;
        let improved = v.score > best + cfg.tie_tolerance;
        if improved {
            best = v.score;
            stale = 0;
        } else {
            stale += 1;
        }
        log::debug!(
            "epoch {epoch} step {step}: val r {:.4} loss {:.5}",
            v.score,
            epoch_terms.total
        );
        pool.offer(&model, v.score);
        log.push(LogRecord {
            step,
            epoch,
            val_r: v.score,
            per_roi: v.per_group,
            loss: epoch_terms,
            improved,
        });
        if stale >= cfg.patience {
            break;
        }
    }
    let (best_model, best_score) = pool
        .best()
        .map(|(m, s)| (m.clone(), s))
        .expect("at least one validation ran");
    Ok(FitOutcome {
        best: best_model,
        best_score,
        pool,
        log,
        steps: step,
    })
}

/// `cap` distinct voxels from `active` (sorted); all of them when the cap
/// covers the set.
pub(crate) fn draw_voxels(active: &[usize], cap: usize, rng: &mut SeededRng) -> Vec<usize> {
    if cap >= active.len() {
        return active.to_vec();
    }
    let mut s: Vec<usize> = rng
        .sample_indices(active.len(), cap)
        .into_iter()
        .map(|i| active[i])
        .collect();
    s.sort_unstable();
    s
}
