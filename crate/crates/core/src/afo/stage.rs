use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::plan::{make_rand_roi, RecipePlan};
use crate::data::{write_matrix, Dataset, MatrixSidecar, MATRIX_FORMAT};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::evalkit::pearson_per_voxel;
use crate::numcore::derive_seed;
use crate::trainer::{fit, greedy_soup, validate, write_log, LogRecord, StageRole, TrainConfig};
use crate::veroi::Parcellation;

const NAIVE_TAG: u64 = 0;
const STAGE3_TAG: u64 = 3;
const RAND_ROI_TAG: u64 = 0x726f69;

/// One trained model as exported by a recipe job: only the heads of the
/// voxels it is responsible for are kept.
#[derive(Clone, Debug)]
pub struct JobOutcome {
    pub name: String,
    /// Voxels whose heads `model` carries, in head order.
    pub voxels: Vec<usize>,
    pub model: EncoderModel<f32>,
    /// Validation score of the soup on the job's conditioning voxels.
    pub val_score: f64,
    /// Same score for the best single checkpoint of the pool.
    pub best_single_score: f64,
    /// Test-split Pearson r per exported voxel.
    pub test_r: Vec<f64>,
    pub log: Vec<LogRecord>,
    pub steps: usize,
    pub soup_size: usize,
}

impl JobOutcome {
    pub fn mean_test_r(&self) -> f64 {
        self.test_r.iter().sum::<f64>() / self.test_r.len().max(1) as f64
    }
}

/// Per-ROI models of one stage and the predictions they leave behind.
#[derive(Clone, Debug)]
pub struct StageArtifacts {
    /// 1 for stage 1, 2 for the first stage-2 round, 3 for the next, ...
    pub round: usize,
    /// One job per ROI, in ROI order.
    pub jobs: Vec<JobOutcome>,
    /// Train and validation images, ascending.
    pub teacher_images: Vec<usize>,
    /// Predictions `[teacher_images x voxels]`.
    pub teacher: Vec<f32>,
}

impl StageArtifacts {
    fn assemble(
        round: usize,
        jobs: Vec<JobOutcome>,
        ds: &Dataset,
        teacher_images: Vec<usize>,
    ) -> Result<Self> {
        let n = ds.voxels.len();
        let mut covered = vec![0usize; n];
        let mut teacher = vec![f32::NAN; teacher_images.len() * n];
        for job in &jobs {
            let coords: Vec<[f32; 3]> = job.voxels.iter().map(|&v| ds.voxels.voxels[v].p).collect();
            let heads: Vec<usize> = (0..job.voxels.len()).collect();
            let pred = job
                .model
                .predict(&ds.features, &teacher_images, &coords, &heads)?;
            for (row, chunk) in pred.chunks(heads.len()).enumerate() {
                for (j, &v) in job.voxels.iter().enumerate() {
                    teacher[row * n + v] = chunk[j];
                }
            }
            for &v in &job.voxels {
                covered[v] += 1;
            }
        }
        if let Some(v) = covered.iter().position(|&c| c != 1) {
            return Err(Error::Invalid(format!(
                "stage {round}: voxel `{}` covered by {} teachers",
                ds.voxels.voxels[v].id, covered[v]
            )));
        }
        Ok(Self {
            round,
            jobs,
            teacher_images,
            teacher,
        })
    }

    /// Teacher predictions spread over every image of the store; rows
    /// outside train/val are NaN and never read by the trainer.
    pub fn teacher_full(&self, n_images: usize) -> Vec<f32> {
        let n = self.teacher.len() / self.teacher_images.len().max(1);
        let mut out = vec![f32::NAN; n_images * n];
        for (row, &i) in self.teacher_images.iter().enumerate() {
            out[i * n..(i + 1) * n].copy_from_slice(&self.teacher[row * n..(row + 1) * n]);
        }
        out
    }

    /// Test r per voxel, gathered from the job responsible for it.
    pub fn test_r(&self, n_voxels: usize) -> Vec<f64> {
        let mut r = vec![f64::NAN; n_voxels];
        for job in &self.jobs {
            for (&v, &x) in job.voxels.iter().zip(&job.test_r) {
                r[v] = x;
            }
        }
        r
    }

    pub fn mean_test_r(&self) -> f64 {
        let r: Vec<f64> = self
            .jobs
            .iter()
            .flat_map(|j| j.test_r.iter().copied())
            .collect();
        r.iter().sum::<f64>() / r.len().max(1) as f64
    }

    /// Total exported parameters: one trunk per ROI plus every head once.
    pub fn param_count(&self) -> usize {
        self.jobs
            .iter()
            .map(|j| j.model.param_count().total())
            .sum()
    }

    /// Writes `roi{k}.ckpt`, `teacher_roi{k}.bin` (+ sidecar), training
    /// logs and `scores.csv` into `dir`.
    pub fn save(&self, dir: &Path, ds: &Dataset) -> Result<()> {
        fs::create_dir_all(dir)?;
        let n = ds.voxels.len();
        let row_ids: Vec<String> = self
            .teacher_images
            .iter()
            .map(|&i| ds.features.image_ids[i].clone())
            .collect();
        for (k, job) in self.jobs.iter().enumerate() {
            job.model.save(&dir.join(format!("roi{k}.ckpt")), false)?;
            write_log(&job.log, &dir.join(format!("log_roi{k}.jsonl")))?;
            let mut values = Vec::with_capacity(row_ids.len() * job.voxels.len());
            for row in 0..row_ids.len() {
                values.extend(job.voxels.iter().map(|&v| self.teacher[row * n + v]));
            }
            let side = MatrixSidecar {
                format: MATRIX_FORMAT.into(),
                rows: row_ids.len(),
                cols: job.voxels.len(),
                row_ids: row_ids.clone(),
                col_ids: job
                    .voxels
                    .iter()
                    .map(|&v| ds.voxels.voxels[v].id.clone())
                    .collect(),
                repetitions: None,
            };
            write_matrix(&dir.join(format!("teacher_roi{k}.bin")), &side, &values)?;
        }
        fs::write(dir.join("scores.csv"), score_csv(&self.jobs))?;
        Ok(())
    }
}

fn score_csv(jobs: &[JobOutcome]) -> String {
    let mut out = String::from("job,name,voxels,val_r,test_r,steps,soup_size\n");
    for (k, j) in jobs.iter().enumerate() {
        out.push_str(&format!(
            "{k},{},{},{:.6},{:.6},{},{}\n",
            j.name,
            j.voxels.len(),
            j.val_score,
            j.mean_test_r(),
            j.steps,
            j.soup_size
        ));
    }
    out
}

/// Trains one model under `role`, soups its checkpoint pool on the
/// conditioning voxels, and exports the heads in `export`.
pub fn train_job(
    ds: &Dataset,
    model: EncoderModel<f32>,
    cfg: &TrainConfig,
    role: &StageRole,
    export: &[usize],
    name: &str,
) -> Result<JobOutcome> {
    let [_, val, test] = ds.split_indices()?;
    let out = fit(model, ds, cfg, role)?;
    let soup = greedy_soup(&out.pool, &mut |m| {
        validate(m, ds, &val, role).map(|v| v.score)
    })?;
    let model = soup.model.select_heads(export)?;
    let test_r = if test.len() < 2 {
        vec![f64::NAN; export.len()]
    } else {
        let coords: Vec<[f32; 3]> = export.iter().map(|&v| ds.voxels.voxels[v].p).collect();
        let heads: Vec<usize> = (0..export.len()).collect();
        let pred = model.predict(&ds.features, &test, &coords, &heads)?;
        let y: Vec<f32> = test
            .iter()
            .flat_map(|&i| export.iter().map(move |&v| ds.responses.get(i, v)))
            .collect();
        pearson_per_voxel(&pred, &y, test.len(), export.len())?.r
    };
    log::info!(
        "{name}: val r {:.4} (soup of {}), {} steps",
        soup.score,
        soup.members.len(),
        out.steps
    );
    Ok(JobOutcome {
        name: name.to_string(),
        voxels: export.to_vec(),
        model,
        val_score: soup.score,
        best_single_score: soup.best_single,
        test_r,
        log: out.log,
        steps: out.steps,
        soup_size: soup.members.len(),
    })
}

fn job_config(base: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..base.clone()
    }
}

fn fresh_model(ds: &Dataset, plan: &RecipePlan, seed: u64) -> Result<EncoderModel<f32>> {
    EncoderModel::from_spec(&plan.model, &ds.features, ds.voxels.len(), seed)
}

/// Runs `job` for every ROI on a pool of `plan.workers` threads. Every job
/// runs to completion; failures are reported together afterwards.
fn run_jobs(
    plan: &RecipePlan,
    parc: &Parcellation,
    job: impl Fn(usize) -> Result<JobOutcome> + Sync,
) -> Result<Vec<JobOutcome>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.workers)
        .build()
        .map_err(|e| Error::Invalid(format!("worker pool: {e}")))?;
    let results: Vec<Result<JobOutcome>> =
        pool.install(|| (0..parc.n_rois()).into_par_iter().map(&job).collect());
    let mut jobs = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(j) => jobs.push(j),
            Err(e) => failures.push(format!("ROI {k} (`{}`): {e}", parc.names[k])),
        }
    }
    if failures.is_empty() {
        Ok(jobs)
    } else {
        Err(Error::Jobs(failures.len(), failures.join("; ")))
    }
}

fn teacher_images(ds: &Dataset) -> Result<Vec<usize>> {
    let [train, val, _] = ds.split_indices()?;
    let mut images: Vec<usize> = train.into_iter().chain(val).collect();
    images.sort_unstable();
    Ok(images)
}

fn check(ds: &Dataset, plan: &RecipePlan, parc: &Parcellation) -> Result<()> {
    plan.validate()?;
    parc.check_against(&ds.voxels)
}

/// The stage-1 role for ROI `k`: ground truth on its voxels only.
pub(crate) fn stage1_role(ds: &Dataset, parc: &Parcellation, k: usize) -> StageRole {
    let members = parc.members(k);
    StageRole {
        groups: vec![(parc.names[k].clone(), members.clone())],
        ..StageRole::target_only(ds, &members)
    }
}

/// The stage-2 role for ROI `k`: ground truth on its voxels, distillation
/// towards `teacher` on every other voxel. `None` means no other voxel.
pub(crate) fn stage2_role(
    ds: &Dataset,
    parc: &Parcellation,
    k: usize,
    teacher: Option<Vec<f32>>,
) -> StageRole {
    let mut role = stage1_role(ds, parc, k);
    role.dk = role.gt.iter().map(|g| !g).collect();
    if role.dk.iter().any(|d| *d) {
        role.teacher = teacher;
    } else {
        role.teacher = None;
    }
    role
}

/// One model per ROI trained on that ROI's ground truth alone.
pub fn run_stage1(ds: &Dataset, plan: &RecipePlan, parc: &Parcellation) -> Result<StageArtifacts> {
    check(ds, plan, parc)?;
    let jobs = run_jobs(plan, parc, |k| {
        let seed = derive_seed(plan.seed, &[1, k as u64]);
        let role = stage1_role(ds, parc, k);
        let name = format!("stage1/{}", parc.names[k]);
        train_job(
            ds,
            fresh_model(ds, plan, seed)?,
            &job_config(&plan.stage1, seed),
            &role,
            &parc.members(k),
            &name,
        )
    })?;
    StageArtifacts::assemble(1, jobs, ds, teacher_images(ds)?)
}

/// One all-voxel model per ROI: ground truth on the ROI, the previous
/// stage's predictions (or, with `no_dk`, ground truth) as helpers
/// elsewhere. Only the target ROI's heads are exported.
pub fn run_stage2(
    ds: &Dataset,
    plan: &RecipePlan,
    parc: &Parcellation,
    prev: &StageArtifacts,
) -> Result<StageArtifacts> {
    check(ds, plan, parc)?;
    if prev.jobs.len() != parc.n_rois() {
        return Err(Error::Invalid(format!(
            "previous stage has {} ROI jobs, parcellation has {}",
            prev.jobs.len(),
            parc.n_rois()
        )));
    }
    let n_images = ds.features.n_images();
    let teacher = if plan.variant.no_dk {
        let n = ds.voxels.len();
        (0..n_images * n)
            .map(|j| ds.responses.get(j / n, j % n))
            .collect()
    } else {
        prev.teacher_full(n_images)
    };
    let round = prev.round + 1;
    let jobs = run_jobs(plan, parc, |k| {
        let seed = derive_seed(plan.seed, &[2, round as u64, k as u64]);
        let role = stage2_role(ds, parc, k, Some(teacher.clone()));
        let name = format!("stage2/{}", parc.names[k]);
        train_job(
            ds,
            fresh_model(ds, plan, seed)?,
            &job_config(&plan.stage2, seed),
            &role,
            &parc.members(k),
            &name,
        )
    })?;
    StageArtifacts::assemble(round, jobs, ds, prev.teacher_images.clone())
}

/// The final single model: ground truth plus distillation towards the
/// stage-2 predictions on every voxel.
pub fn run_stage3(
    ds: &Dataset,
    plan: &RecipePlan,
    parc: &Parcellation,
    s2: &StageArtifacts,
) -> Result<JobOutcome> {
    check(ds, plan, parc)?;
    let seed = derive_seed(plan.seed, &[STAGE3_TAG]);
    let mut model = fresh_model(ds, plan, seed)?;
    if plan.variant.warm_start_s3 {
        let donor = &s2
            .jobs
            .first()
            .ok_or_else(|| Error::Invalid("stage 2 has no models".into()))?
            .model;
        for (p, d) in model.params_mut().into_iter().zip(donor.params()) {
            if !p.name.starts_with("head.") {
                p.value = d.value.clone();
            }
        }
    }
    let n = ds.voxels.len();
    let role = StageRole {
        dk: vec![true; n],
        teacher: Some(s2.teacher_full(ds.features.n_images())),
        groups: parc.groups(),
        ..StageRole::full(ds)
    };
    let all: Vec<usize> = (0..n).collect();
    train_job(
        ds,
        model,
        &job_config(&plan.stage3, seed),
        &role,
        &all,
        "stage3",
    )
}

/// A single all-voxel model trained on ground truth only.
pub fn naive_mix(ds: &Dataset, plan: &RecipePlan, parc: &Parcellation) -> Result<JobOutcome> {
    check(ds, plan, parc)?;
    let seed = derive_seed(plan.seed, &[NAIVE_TAG]);
    let role = StageRole {
        groups: parc.groups(),
        ..StageRole::full(ds)
    };
    let all: Vec<usize> = (0..ds.voxels.len()).collect();
    train_job(
        ds,
        fresh_model(ds, plan, seed)?,
        &job_config(&plan.stage1, seed),
        &role,
        &all,
        "naive_mix",
    )
}

/// Everything a recipe run produced.
#[derive(Clone, Debug)]
pub struct RecipeOutcome {
    /// The parcellation actually used (random when `rand_roi` is set).
    pub parcellation: Parcellation,
    pub naive: Option<JobOutcome>,
    pub stage1: Option<StageArtifacts>,
    /// Stage-2 rounds: the regular one, then any extra ones.
    pub stage2: Vec<StageArtifacts>,
    pub stage3: Option<JobOutcome>,
}

impl RecipeOutcome {
    /// The model the run ends with.
    pub fn final_model(&self) -> &JobOutcome {
        self.stage3
            .as_ref()
            .or(self.naive.as_ref())
            .expect("recipe produced a model")
    }
}

/// Runs the recipe selected by `plan.variant`, writing artifacts under
/// `out` when given.
pub fn run_recipe(
    ds: &Dataset,
    plan: &RecipePlan,
    parc: &Parcellation,
    out: Option<&Path>,
) -> Result<RecipeOutcome> {
    check(ds, plan, parc)?;
    let parc = if plan.variant.rand_roi {
        make_rand_roi(parc, derive_seed(plan.seed, &[RAND_ROI_TAG]))
    } else {
        parc.clone()
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        parc.save(&dir.join("parcellation.json"))?;
    }
    let mut outcome = RecipeOutcome {
        parcellation: parc.clone(),
        naive: None,
        stage1: None,
        stage2: Vec::new(),
        stage3: None,
    };
    if plan.variant.naive_mix {
        let job = naive_mix(ds, plan, &parc)?;
        if let Some(dir) = out {
            save_single(&job, &dir.join("naive_mix"))?;
        }
        outcome.naive = Some(job);
        return Ok(outcome);
    }
    let s1 = run_stage1(ds, plan, &parc)?;
    if let Some(dir) = out {
        s1.save(&dir.join("stage1"), ds)?;
    }
    let mut prev = s1.clone();
    for i in 0..=plan.variant.extra_s2_iters {
        let s2 = run_stage2(ds, plan, &parc, &prev)?;
        if let Some(dir) = out {
            let name = if i == 0 {
                "stage2".to_string()
            } else {
                format!("stage2_extra{i}")
            };
            s2.save(&dir.join(name), ds)?;
        }
        outcome.stage2.push(s2.clone());
        prev = s2;
    }
    let s3 = run_stage3(ds, plan, &parc, &prev)?;
    if let Some(dir) = out {
        save_single(&s3, &dir.join("stage3"))?;
    }
    outcome.stage1 = Some(s1);
    outcome.stage3 = Some(s3);
    Ok(outcome)
}

fn save_single(job: &JobOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    job.model.save(&dir.join("model.ckpt"), false)?;
    write_log(&job.log, &dir.join("log.jsonl"))?;
    fs::write(dir.join("scores.csv"), score_csv(std::slice::from_ref(job)))?;
    Ok(())
}
