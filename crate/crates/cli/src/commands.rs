use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use voxelcast_core::afo::{run_recipe, train_job, RecipePlan};
use voxelcast_core::data::responses::sidecar_path;
use voxelcast_core::data::{read_feature_store, read_matrix, write_json, Dataset, FeatureStore};
use voxelcast_core::decode::{
    decode_report, rank_candidates, retrieval_metrics, CandidateSet, RetrievalResult,
    DEFAULT_CANDIDATES,
};
use voxelcast_core::encoder::{EncoderModel, ModelSpec};
use voxelcast_core::evalkit::{
    adapter_features, emit_reports, linear_probe, raw_features, score_model, FeatureMatrix,
    NormConvention, ReportMeta, ScoreReport,
};
use voxelcast_core::gradsuite::run_suite;
use voxelcast_core::synth::{
    generate, oracle_ceiling, write_bundle, GroundTruth, SynthSpec, VoxelGroup, GROUND_TRUTH_FILE,
};
use voxelcast_core::trainer::{write_log, StageRole, TrainConfig};
use voxelcast_core::veroi::{
    adjusted_rand_index, average_head_weights, build_veroi, Parcellation, VeroiConfig,
};
use voxelcast_core::Error;

use crate::run::{load_config, start_run, Resolved};
use crate::{out_string, CliError, Global, Split};

type CliResult = Result<(), CliError>;

/// The bundle `synth` writes without `--spec`: three ROIs of falling SNR.
pub fn default_synth_spec() -> SynthSpec {
    let mut spec = SynthSpec::simple(600, 4, 8, 6, 0, 4.0);
    spec.groups = [("V1", 4.0), ("V4", 2.0), ("IT", 1.0)]
        .into_iter()
        .map(|(roi, snr)| VoxelGroup {
            roi: Some(roi.into()),
            ..VoxelGroup::new(60, snr)
        })
        .collect();
    spec
}

fn resolved<'a, C>(
    command: &'a str,
    g: &Global,
    seed: u64,
    out: &Path,
    config: C,
) -> Resolved<'a, C> {
    Resolved {
        command,
        seed,
        threads: g.threads(),
        out_dir: out.display().to_string(),
        config,
    }
}

fn load_data(dir: &Path) -> Result<Dataset, CliError> {
    Ok(Dataset::load(dir)?)
}

fn load_model(path: &Path, ds: &Dataset) -> Result<EncoderModel<f32>, CliError> {
    let model = EncoderModel::<f32>::load(path)?;
    if model.n_voxels() != ds.voxels.len() {
        return Err(Error::Invalid(format!(
            "{} has {} voxel heads, the dataset has {} voxels",
            path.display(),
            model.n_voxels(),
            ds.voxels.len()
        ))
        .into());
    }
    Ok(model)
}

/// Oracle ceilings per voxel when the bundle carries its ground truth.
fn oracle_ceilings(data: &Path, ds: &Dataset) -> Result<Option<Vec<f64>>, CliError> {
    let path = data.join(GROUND_TRUTH_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let gt = GroundTruth::load(&path)?;
    let snr: HashMap<&str, f32> = gt.voxels.iter().map(|v| (v.id.as_str(), v.snr.0)).collect();
    let mut out = Vec::with_capacity(ds.voxels.len());
    for v in &ds.voxels.voxels {
        match snr.get(v.id.as_str()) {
            Some(&s) => out.push(oracle_ceiling(s, gt.n_reps) as f64),
            None => {
                log::warn!(
                    "ground truth has no voxel `{}`; skipping noise normalisation",
                    v.id
                );
                return Ok(None);
            }
        }
    }
    Ok(Some(out))
}

fn with_convention(c: &Option<Vec<f64>>) -> Option<(&[f64], NormConvention)> {
    c.as_deref().map(|c| (c, NormConvention::Ratio))
}

fn roi_index(parc: &Parcellation, key: &str) -> Result<usize, CliError> {
    parc.names
        .iter()
        .position(|n| n == key)
        .or_else(|| key.parse::<usize>().ok().filter(|&k| k < parc.n_rois()))
        .ok_or_else(|| CliError::Usage(format!("no ROI `{key}` (have: {})", parc.names.join(", "))))
}

fn split_images(ds: &Dataset, split: Split) -> Result<Vec<usize>, CliError> {
    let [train, val, test] = ds.split_indices()?;
    Ok(match split {
        Split::Train => train,
        Split::Val => val,
        Split::Test => test,
    })
}

// ---------------------------------------------------------------- synth

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Synthetic-brain spec (JSON); a three-ROI desk brain when omitted
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Bundle directory to write
    #[arg(long)]
    out: PathBuf,
}

pub fn synth(g: &Global, a: &SynthArgs) -> CliResult {
    let mut spec = match &a.spec {
        Some(p) => load_config(p)?,
        None => default_synth_spec(),
    };
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    spec.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let inputs: Vec<&Path> = a.spec.iter().map(PathBuf::as_path).collect();
    start_run(
        &a.out,
        &resolved("synth", g, spec.seed, &a.out, &spec),
        &inputs,
    )?;
    let (ds, gt) = generate(&spec)?;
    write_bundle(&ds, &gt, &a.out)?;
    log::info!(
        "wrote {} images x {} voxels to {}",
        ds.features.n_images(),
        ds.voxels.len(),
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset bundle directory
    #[arg(long)]
    data: PathBuf,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// Training settings (JSON with TrainConfig fields)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model settings (JSON with ModelSpec fields)
    #[arg(long)]
    model: Option<PathBuf>,
    /// Pin every voxel's retina coordinate to the grid centre
    #[arg(long)]
    frozen_rm: bool,
    /// Pin the layer selector to uniform weights
    #[arg(long)]
    frozen_ls: bool,
    /// Drop the layer-selector entropy regulariser
    #[arg(long)]
    no_reg_ls: bool,
    /// Drop the global-pool branch
    #[arg(long)]
    no_global_pool: bool,
    /// Train on this ROI only (name or index)
    #[arg(long)]
    roi: Option<String>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Serialize)]
struct TrainResolved<'a> {
    data: String,
    roi: Option<&'a str>,
    model: &'a ModelSpec,
    train: &'a TrainConfig,
}

#[derive(Serialize)]
struct JobSummary<'a> {
    name: &'a str,
    voxels: usize,
    val_score: f64,
    mean_test_r: f64,
    steps: usize,
    soup_size: usize,
    params: usize,
}

pub fn train(g: &Global, a: &TrainArgs) -> CliResult {
    let mut spec: ModelSpec = a
        .model
        .as_deref()
        .map(load_config)
        .transpose()?
        .unwrap_or_default();
    spec.frozen_rm |= a.frozen_rm;
    spec.frozen_ls |= a.frozen_ls;
    spec.global_pool &= !a.no_global_pool;
    let mut cfg: TrainConfig = a
        .config
        .as_deref()
        .map(load_config)
        .transpose()?
        .unwrap_or_default();
    if a.no_reg_ls {
        cfg.lambda_ent = 0.0;
    }
    if let Some(n) = a.max_epochs {
        cfg.max_epochs = n;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let config = TrainResolved {
        data: out_string(&a.data),
        roi: a.roi.as_deref(),
        model: &spec,
        train: &cfg,
    };
    let mut inputs = vec![a.data.as_path()];
    inputs.extend(a.config.as_deref());
    inputs.extend(a.model.as_deref());
    start_run(
        &a.out,
        &resolved("train", g, cfg.seed, &a.out, config),
        &inputs,
    )?;

    let ds = load_data(&a.data)?;
    let (role, export, name) = match &a.roi {
        Some(key) => {
            let parc = Parcellation::from_voxel_rois(&ds.voxels)?;
            let k = roi_index(&parc, key)?;
            let members = parc.members(k);
            let role = StageRole {
                groups: vec![(parc.names[k].clone(), members.clone())],
                ..StageRole::target_only(&ds, &members)
            };
            (role, members, parc.names[k].clone())
        }
        None => (
            StageRole::full(&ds),
            (0..ds.voxels.len()).collect(),
            "all".to_string(),
        ),
    };
    let model = EncoderModel::from_spec(&spec, &ds.features, ds.voxels.len(), cfg.seed)?;
    let job = train_job(&ds, model, &cfg, &role, &export, &name)?;
    job.model.save(&a.out.join("model.ckpt"), false)?;
    write_log(&job.log, &a.out.join("log.jsonl"))?;
    let ceilings = oracle_ceilings(&a.data, &ds)?;
    let meta = ReportMeta {
        model_id: name.clone(),
        split: "test".into(),
        seed: cfg.seed,
    };
    let rep = emit_reports(
        &job.model,
        &ds,
        &export,
        &a.out,
        meta,
        with_convention(&ceilings),
    )?;
    write_json(
        &a.out.join("summary.json"),
        &JobSummary {
            name: &name,
            voxels: export.len(),
            val_score: job.val_score,
            mean_test_r: job.mean_test_r(),
            steps: job.steps,
            soup_size: job.soup_size,
            params: job.model.param_count().total(),
        },
    )?;
    println!(
        "{name}: val r {:.4}, test r {:.4} over {} voxels",
        job.val_score,
        rep.report.overall.mean,
        export.len()
    );
    Ok(())
}

// ---------------------------------------------------------------- afo

#[derive(Args, Debug)]
pub struct AfoRunArgs {
    /// Recipe plan (JSON with RecipePlan fields)
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// Parcellation JSON; the voxel table's ROI labels when omitted
    #[arg(long)]
    parcellation: Option<PathBuf>,
    /// One all-ROI model on ground truth instead of the recipe
    #[arg(long)]
    naive_mix: bool,
    /// Stage-2 helpers learn from ground truth instead of stage-1 predictions
    #[arg(long)]
    no_dk: bool,
    /// Replace the parcellation with a random one of identical sizes
    #[arg(long)]
    rand_roi: bool,
    /// Extra stage-2 rounds
    #[arg(long)]
    s2_iters: Option<usize>,
}

#[derive(Serialize)]
struct AfoResolved<'a> {
    data: String,
    parcellation: Option<String>,
    plan: &'a RecipePlan,
}

#[derive(Serialize)]
struct StageSummary {
    stage: String,
    mean_test_r: f64,
    params: usize,
}

pub fn afo_run(g: &Global, a: &AfoRunArgs) -> CliResult {
    let mut plan: RecipePlan = a
        .plan
        .as_deref()
        .map(load_config)
        .transpose()?
        .unwrap_or_default();
    plan.variant.naive_mix |= a.naive_mix;
    plan.variant.no_dk |= a.no_dk;
    plan.variant.rand_roi |= a.rand_roi;
    if let Some(n) = a.s2_iters {
        plan.variant.extra_s2_iters = n;
    }
    if let Some(s) = g.seed {
        plan.seed = s;
    }
    plan.workers = g.threads();
    plan.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let config = AfoResolved {
        data: out_string(&a.data),
        parcellation: a.parcellation.as_ref().map(out_string),
        plan: &plan,
    };
    let mut inputs = vec![a.data.as_path()];
    inputs.extend(a.plan.as_deref());
    inputs.extend(a.parcellation.as_deref());
    start_run(
        &a.out,
        &resolved("afo run", g, plan.seed, &a.out, config),
        &inputs,
    )?;

    let ds = load_data(&a.data)?;
    let parc = match &a.parcellation {
        Some(p) => Parcellation::load(p, &ds.voxels)?,
        None => Parcellation::from_voxel_rois(&ds.voxels)?,
    };
    let outcome = run_recipe(&ds, &plan, &parc, Some(&a.out))?;

    let mut stages = Vec::new();
    if let Some(j) = &outcome.naive {
        stages.push(StageSummary {
            stage: "naive_mix".into(),
            mean_test_r: j.mean_test_r(),
            params: j.model.param_count().total(),
        });
    }
    if let Some(s1) = &outcome.stage1 {
        stages.push(StageSummary {
            stage: "stage1".into(),
            mean_test_r: s1.mean_test_r(),
            params: s1.param_count(),
        });
    }
    for (i, s2) in outcome.stage2.iter().enumerate() {
        stages.push(StageSummary {
            stage: if i == 0 {
                "stage2".into()
            } else {
                format!("stage2_extra{i}")
            },
            mean_test_r: s2.mean_test_r(),
            params: s2.param_count(),
        });
    }
    if let Some(j) = &outcome.stage3 {
        stages.push(StageSummary {
            stage: "stage3".into(),
            mean_test_r: j.mean_test_r(),
            params: j.model.param_count().total(),
        });
    }
    write_json(&a.out.join("summary.json"), &stages)?;

    let last = outcome.final_model();
    let ceilings = oracle_ceilings(&a.data, &ds)?;
    let meta = ReportMeta {
        model_id: last.name.clone(),
        split: "test".into(),
        seed: plan.seed,
    };
    emit_reports(
        &last.model,
        &ds,
        &last.voxels,
        &a.out.join("report"),
        meta,
        with_convention(&ceilings),
    )?;
    for s in &stages {
        println!(
            "{:<14} mean test r {:.4}  params {}",
            s.stage, s.mean_test_r, s.params
        );
    }
    Ok(())
}

// ---------------------------------------------------------------- veroi

#[derive(Args, Debug)]
pub struct VeroiArgs {
    /// Trained all-voxel checkpoints whose head weights are averaged
    #[arg(long, num_args = 1.., required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// k-means clusters before Ward linkage [default: min(500, N/10)]
    #[arg(long)]
    k: Option<usize>,
    /// Ward merge distance below which clusters are joined
    #[arg(long)]
    threshold: f64,
}

#[derive(Serialize)]
struct VeroiSummary {
    n_rois: usize,
    sizes: Vec<usize>,
    /// Agreement with the planted weight families, when known.
    family_ari: Option<f64>,
}

pub fn veroi(g: &Global, a: &VeroiArgs) -> CliResult {
    let cfg = VeroiConfig {
        kmeans_k: a.k,
        seed: g.seed.unwrap_or(0),
        ..VeroiConfig::new(a.threshold)
    };
    let mut inputs: Vec<&Path> = vec![a.data.as_path()];
    inputs.extend(a.models.iter().map(PathBuf::as_path));
    start_run(
        &a.out,
        &resolved("veroi", g, cfg.seed, &a.out, &cfg),
        &inputs,
    )?;

    let ds = load_data(&a.data)?;
    let models = a
        .models
        .iter()
        .map(|p| load_model(p, &ds))
        .collect::<Result<Vec<_>, _>>()?;
    let weights = average_head_weights(&models)?;
    let dim = models[0].head_w.shape()[1];
    let res = build_veroi(&weights, dim, &cfg)?;
    let parc = Parcellation::from_labels(&ds.voxels, res.labels.clone(), "veroi")?;
    parc.save(&a.out.join("parcellation.json"))?;
    fs::write(a.out.join("roi_sizes.csv"), parc.size_table_csv())?;
    write_json(&a.out.join("dendrogram.json"), &res.dendrogram)?;

    let gt_path = a.data.join(GROUND_TRUTH_FILE);
    let family_ari = if gt_path.exists() {
        let gt = GroundTruth::load(&gt_path)?;
        let fam: Option<Vec<usize>> = gt.voxels.iter().map(|v| v.family).collect();
        fam.filter(|f| f.len() == res.labels.len())
            .map(|f| adjusted_rand_index(&res.labels, &f))
    } else {
        None
    };
    let summary = VeroiSummary {
        n_rois: res.n_rois,
        sizes: parc.sizes(),
        family_ari,
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    println!("{} ROIs, sizes {:?}", summary.n_rois, summary.sizes);
    if let Some(ari) = family_ari {
        println!("ARI against planted families {ari:.4}");
    }
    Ok(())
}

// ---------------------------------------------------------------- eval / report

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
}

#[derive(Serialize)]
struct ModelResolved {
    model: String,
    data: String,
    split: &'static str,
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn model_id(p: &Path) -> String {
    p.file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

pub fn eval(g: &Global, a: &EvalArgs) -> CliResult {
    let seed = g.seed.unwrap_or(0);
    let config = ModelResolved {
        model: out_string(&a.model),
        data: out_string(&a.data),
        split: split_name(a.split),
    };
    start_run(
        &a.out,
        &resolved("eval", g, seed, &a.out, config),
        &[&a.data, &a.model],
    )?;
    let ds = load_data(&a.data)?;
    let model = load_model(&a.model, &ds)?;
    let images = split_images(&ds, a.split)?;
    let all: Vec<usize> = (0..ds.voxels.len()).collect();
    let scores = score_model(&model, &ds, &all, &images)?;
    let ceilings = oracle_ceilings(&a.data, &ds)?;
    let rois: Vec<Option<String>> = ds.voxels.voxels.iter().map(|v| v.roi.clone()).collect();
    let meta = ReportMeta {
        model_id: model_id(&a.model),
        split: split_name(a.split).into(),
        seed,
    };
    let report = ScoreReport::build(
        meta,
        &ds.voxels.ids(),
        &rois,
        &scores,
        with_convention(&ceilings),
    )?;
    report.save(&a.out)?;
    println!(
        "{} split: mean r {:.4}, median r {:.4}",
        split_name(a.split),
        report.overall.mean,
        report.overall.median
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
}

pub fn report(g: &Global, a: &ReportArgs) -> CliResult {
    let seed = g.seed.unwrap_or(0);
    let config = ModelResolved {
        model: out_string(&a.model),
        data: out_string(&a.data),
        split: "test",
    };
    start_run(
        &a.out,
        &resolved("report", g, seed, &a.out, config),
        &[&a.data, &a.model],
    )?;
    let ds = load_data(&a.data)?;
    let model = load_model(&a.model, &ds)?;
    let ceilings = oracle_ceilings(&a.data, &ds)?;
    let meta = ReportMeta {
        model_id: model_id(&a.model),
        split: "test".into(),
        seed,
    };
    let all: Vec<usize> = (0..ds.voxels.len()).collect();
    let rep = emit_reports(&model, &ds, &all, &a.out, meta, with_convention(&ceilings))?;
    for f in &rep.files {
        println!("{}", f.display());
    }
    Ok(())
}

// ---------------------------------------------------------------- probe

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// Probe this model's adapter output instead of the raw features
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    components: usize,
    /// Ridge penalty [default: 1e-3 x mean PCA-score variance]
    #[arg(long)]
    ridge: Option<f64>,
}

#[derive(Serialize)]
struct ProbeResolved {
    data: String,
    model: Option<String>,
    components: usize,
    ridge: Option<f64>,
}

#[derive(Serialize)]
struct ProbeSummary {
    features: &'static str,
    dim: usize,
    components: usize,
    explained_variance: f64,
    ridge: f64,
    mean_test_r: f64,
}

pub fn probe(g: &Global, a: &ProbeArgs) -> CliResult {
    if a.components == 0 {
        return Err(CliError::Usage("--components must be >= 1".into()));
    }
    let seed = g.seed.unwrap_or(0);
    let config = ProbeResolved {
        data: out_string(&a.data),
        model: a.model.as_ref().map(out_string),
        components: a.components,
        ridge: a.ridge,
    };
    let mut inputs = vec![a.data.as_path()];
    inputs.extend(a.model.as_deref());
    start_run(&a.out, &resolved("probe", g, seed, &a.out, config), &inputs)?;

    let ds = load_data(&a.data)?;
    let (values, dim, kind) = match &a.model {
        Some(p) => {
            let (v, d) = adapter_features(&load_model(p, &ds)?, &ds.features)?;
            (v, d, "adapter")
        }
        None => (raw_features(&ds.features), ds.features.image_len(), "raw"),
    };
    let [train, _, test] = ds.split_indices()?;
    let n = ds.voxels.len();
    let res = linear_probe(
        FeatureMatrix {
            values: &values,
            dim,
        },
        ds.responses.values(),
        n,
        &train,
        &test,
        a.components,
        a.ridge,
    )?;
    let ceilings = oracle_ceilings(&a.data, &ds)?;
    let rois: Vec<Option<String>> = ds.voxels.voxels.iter().map(|v| v.roi.clone()).collect();
    let meta = ReportMeta {
        model_id: format!("probe_{kind}"),
        split: "test".into(),
        seed,
    };
    let report = ScoreReport::build(
        meta,
        &ds.voxels.ids(),
        &rois,
        &res.scores,
        with_convention(&ceilings),
    )?;
    report.save(&a.out)?;
    let summary = ProbeSummary {
        features: kind,
        dim,
        components: res.pca.n_components(),
        explained_variance: res.pca.explained.iter().sum(),
        ridge: res.ridge,
        mean_test_r: res.scores.mean(),
    };
    write_json(&a.out.join("probe.json"), &summary)?;
    println!(
        "{kind} features: {} components ({:.1}% variance), ridge {:.3e}, mean test r {:.4}",
        summary.components,
        100.0 * summary.explained_variance,
        summary.ridge,
        summary.mean_test_r
    );
    Ok(())
}

// ---------------------------------------------------------------- decode

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset bundle: voxel table, and default candidates and queries
    #[arg(long)]
    data: PathBuf,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// Feature-store directory of candidate images [default: the bundle's validation images]
    #[arg(long)]
    candidates: Option<PathBuf>,
    /// Query response matrix (rows: image ids, columns: voxel ids) [default: measured responses of the candidates]
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Condition on this ROI (name or index) instead of every voxel
    #[arg(long)]
    roi: Option<String>,
    #[arg(long, default_value_t = DEFAULT_CANDIDATES)]
    max_candidates: usize,
}

#[derive(Serialize)]
struct DecodeResolved<'a> {
    model: String,
    data: String,
    candidates: Option<String>,
    queries: Option<String>,
    roi: Option<&'a str>,
    max_candidates: usize,
}

#[derive(Serialize)]
struct DecodeOutput<'a> {
    candidates: usize,
    voxels: usize,
    report: voxelcast_core::decode::DecodeReport,
    queries: &'a [RetrievalResult],
}

pub fn decode(g: &Global, a: &DecodeArgs) -> CliResult {
    let seed = g.seed.unwrap_or(0);
    let config = DecodeResolved {
        model: out_string(&a.model),
        data: out_string(&a.data),
        candidates: a.candidates.as_ref().map(out_string),
        queries: a.queries.as_ref().map(out_string),
        roi: a.roi.as_deref(),
        max_candidates: a.max_candidates,
    };
    let sidecar = a.queries.as_deref().map(sidecar_path);
    let mut inputs = vec![a.data.as_path(), a.model.as_path()];
    inputs.extend(a.candidates.as_deref());
    inputs.extend(a.queries.as_deref());
    inputs.extend(sidecar.as_deref());
    start_run(
        &a.out,
        &resolved("decode", g, seed, &a.out, config),
        &inputs,
    )?;

    let ds = load_data(&a.data)?;
    let model = load_model(&a.model, &ds)?;
    let external: Option<FeatureStore> = a
        .candidates
        .as_deref()
        .map(read_feature_store)
        .transpose()?;
    let store = external.as_ref().unwrap_or(&ds.features);
    let images: Vec<usize> = match &external {
        Some(s) => (0..s.n_images()).collect(),
        None => split_images(&ds, Split::Val)?,
    };
    let images: Vec<usize> = images.into_iter().take(a.max_candidates).collect();

    let (voxels, groups): (Vec<usize>, Vec<(String, Vec<usize>)>) = match &a.roi {
        Some(key) => {
            let parc = Parcellation::from_voxel_rois(&ds.voxels)?;
            (parc.members(roi_index(&parc, key)?), Vec::new())
        }
        None => {
            let all: Vec<usize> = (0..ds.voxels.len()).collect();
            let groups = Parcellation::from_voxel_rois(&ds.voxels)
                .map(|p| p.groups())
                .unwrap_or_default();
            (
                all,
                groups.into_iter().filter(|(_, m)| m.len() >= 2).collect(),
            )
        }
    };
    let set = CandidateSet::predict(&model, store, &images, &ds.voxels.coords(), &voxels)?;

    // queries as rows over `voxels`, each with its true candidate if known
    let (query_ids, queries, truth): (Vec<String>, Vec<f32>, Vec<Option<usize>>) = match &a.queries
    {
        Some(path) => {
            let (side, values) = read_matrix(path)?;
            let col: HashMap<&str, usize> = side
                .col_ids
                .iter()
                .enumerate()
                .map(|(j, id)| (id.as_str(), j))
                .collect();
            let pick = voxels
                .iter()
                .map(|&v| {
                    let id = &ds.voxels.voxels[v].id;
                    col.get(id.as_str()).copied().ok_or_else(|| {
                        Error::Invalid(format!("query matrix has no column for voxel `{id}`"))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let q = values
                .chunks(side.cols)
                .flat_map(|row| pick.iter().map(move |&j| row[j]))
                .collect();
            let truth = side
                .row_ids
                .iter()
                .map(|id| set.ids.iter().position(|c| c == id))
                .collect();
            (side.row_ids, q, truth)
        }
        None => {
            let ids: Vec<String> = set.ids.clone();
            let mut q = Vec::with_capacity(ids.len() * voxels.len());
            for id in &ids {
                let i = ds.features.index_of(id).ok_or_else(|| {
                    Error::Invalid(format!(
                        "candidate `{id}` has no measured response; pass --queries"
                    ))
                })?;
                q.extend(voxels.iter().map(|&v| ds.responses.get(i, v)));
            }
            let truth = (0..ids.len()).map(Some).collect();
            (ids, q, truth)
        }
    };
    let w = voxels.len();
    let results = queries
        .chunks(w)
        .zip(&truth)
        .map(|(q, &t)| rank_candidates(&set, q, t))
        .collect::<Result<Vec<_>, _>>()?;
    let mut report = voxelcast_core::decode::DecodeReport {
        all: retrieval_metrics(&results),
        ..Default::default()
    };
    let known: Vec<usize> = truth
        .iter()
        .enumerate()
        .filter_map(|(q, t)| t.map(|_| q))
        .collect();
    if !groups.is_empty() && !known.is_empty() {
        let q: Vec<f32> = known
            .iter()
            .flat_map(|&r| queries[r * w..(r + 1) * w].iter().copied())
            .collect();
        let t: Vec<usize> = known.iter().map(|&r| truth[r].expect("known")).collect();
        report.per_roi = decode_report(&set, &q, &t, &groups)?.per_roi;
    }

    let mut csv = String::from("query_id,true_rank,top1_id,top1_score\n");
    for (id, r) in query_ids.iter().zip(&results) {
        let top = &r.ranking[0];
        let rank = r.true_rank.map_or_else(String::new, |k| k.to_string());
        csv.push_str(&format!("{id},{rank},{},{:.6}\n", top.id, top.score));
    }
    fs::write(a.out.join("retrieval.csv"), csv)?;
    write_json(
        &a.out.join("retrieval.json"),
        &DecodeOutput {
            candidates: set.len(),
            voxels: w,
            report: report.clone(),
            queries: &results,
        },
    )?;
    let s = report.all;
    println!(
        "{} queries over {} candidates: top-1 {:.3}, top-5 {:.3}, MRR {:.3}",
        s.queries,
        set.len(),
        s.top1,
        s.top5,
        s.mrr
    );
    for (name, s) in &report.per_roi {
        println!(
            "  {name:<10} top-1 {:.3}  top-5 {:.3}  MRR {:.3}",
            s.top1, s.top5, s.mrr
        );
    }
    Ok(())
}

// ---------------------------------------------------------------- gradcheck

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// Seeded random instances per check
    #[arg(long, default_value_t = 5)]
    instances: u64,
}

#[derive(Serialize)]
struct GradcheckResolved {
    instances: u64,
}

pub fn gradcheck(g: &Global, a: &GradcheckArgs) -> CliResult {
    if a.instances == 0 {
        return Err(CliError::Usage("--instances must be >= 1".into()));
    }
    let config = GradcheckResolved {
        instances: a.instances,
    };
    start_run(&a.out, &resolved("gradcheck", g, 0, &a.out, config), &[])?;
    let cases = run_suite(a.instances);
    write_json(&a.out.join("gradcheck.json"), &cases)?;
    let mut failed = Vec::new();
    for c in &cases {
        println!(
            "{:<22} seed {}  {:>4} coords  max rel err {:.2e}  {}",
            c.name,
            c.seed,
            c.checked,
            c.max_rel_err,
            if c.passed { "ok" } else { "FAIL" }
        );
        if !c.passed {
            failed.push(format!("{} seed {}", c.name, c.seed));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(failed.join(", ")).into())
    }
}
