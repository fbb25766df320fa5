//! End-to-end acceptance run on synthetic brains with planted ground truth.
//!
//! `cargo test -p voxelcast-suite` runs every criterion; extra
//! arguments (`-- recovery decoding`) restrict the run to criteria whose key
//! contains one of them. One PASS/FAIL line is printed per check and the
//! process exits non-zero if any check fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use voxelcast_suite::{Check, Report};
use voxelcast_core::afo::{
    make_rand_roi, naive_mix, run_stage1, run_stage2, run_stage3, train_job, JobOutcome, RecipePlan,
};
use voxelcast_core::data::{read_feature_store, write_feature_store, Dataset};
use voxelcast_core::decode::{decode_report, CandidateSet};
use voxelcast_core::encoder::{EncoderModel, ModelSpec};
use voxelcast_core::evalkit::{emit_reports, median, noise_normalized, NormConvention, ReportMeta};
use voxelcast_core::gradsuite::{run_suite, CHECKS};
use voxelcast_core::numcore::SeededRng;
use voxelcast_core::synth::{
    generate, oracle_ceiling, FieldMode, GroundTruth, Preference, Snr, SynthSpec, VoxelGroup,
};
use voxelcast_core::trainer::{StageRole, TrainConfig};
use voxelcast_core::veroi::{
    adjusted_rand_index, average_head_weights, build_veroi, Dendrogram, Parcellation, VeroiConfig,
};

/// Desk-scale optimiser settings shared by every training run below.
fn train_config(max_epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 0.01,
        epoch_fraction: 0.5,
        max_epochs,
        ..TrainConfig::default()
    }
}

fn model_for(ds: &Dataset, spec: &ModelSpec, seed: u64) -> EncoderModel<f32> {
    EncoderModel::from_spec(spec, &ds.features, ds.voxels.len(), seed).expect("model")
}

fn all_voxels(ds: &Dataset) -> Vec<usize> {
    (0..ds.voxels.len()).collect()
}

/// Trains on every voxel and exports every head.
fn train_full(
    ds: &Dataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    seed: u64,
    name: &str,
) -> JobOutcome {
    train_job(
        ds,
        model_for(ds, spec, seed),
        cfg,
        &StageRole::full(ds),
        &all_voxels(ds),
        name,
    )
    .expect("training")
}

/// Soup-vs-best-single pairs gathered from every run.
#[derive(Default)]
struct Soups(Vec<(String, f64, f64)>);

impl Soups {
    fn add(&mut self, job: &JobOutcome) {
        self.0
            .push((job.name.clone(), job.val_score, job.best_single_score));
    }
}

// ---------------------------------------------------------------- gradients

fn gradient_suite(report: &mut Report) {
    let t = Instant::now();
    let cases = run_suite(5);
    let secs = t.elapsed().as_secs_f64();
    let mut per_kernel: BTreeMap<&str, usize> = BTreeMap::new();
    for c in cases.iter().filter(|c| c.checked > 0) {
        *per_kernel.entry(c.name).or_default() += 1;
    }
    let worst = cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{}#{}", c.name, c.seed))
        .collect();
    let min_instances = CHECKS
        .iter()
        .map(|(n, _)| per_kernel.get(n).copied().unwrap_or(0))
        .min()
        .unwrap_or(0);
    report.record(Check::below(
        "gradients: max relative error over all kernels",
        worst,
        1e-3,
    ));
    report.record(Check::new(
        "gradients: every case passes",
        if failed.is_empty() {
            format!("{} cases", cases.len())
        } else {
            failed.join(", ")
        },
        "no failures",
        failed.is_empty(),
    ));
    report.record(Check::at_least(
        "gradients: instances per kernel",
        min_instances as f64,
        5.0,
    ));
    report.record(Check::below("gradients: runtime (s)", secs, 120.0));
}

// ----------------------------------------------------------------- recovery

struct Recovery {
    ds: Dataset,
    gt: GroundTruth,
    job: JobOutcome,
}

fn recovery_spec() -> SynthSpec {
    let mut spec = SynthSpec::simple(2000, 4, 16, 8, 200, 4.0);
    let mut mixed = VoxelGroup::new(100, 4.0);
    mixed.preference = Preference::Mixture;
    spec.groups.push(mixed);
    spec.seed = 1;
    spec
}

fn recovery_run(lambda_ent: f32) -> (Recovery, f64) {
    let (ds, gt) = generate(&recovery_spec()).expect("synth");
    let cfg = TrainConfig {
        lambda_ent,
        ..train_config(150)
    };
    let t = Instant::now();
    let job = train_full(
        &ds,
        &ModelSpec::default(),
        &cfg,
        7,
        &format!("recovery λ={lambda_ent}"),
    );
    (Recovery { ds, gt, job }, t.elapsed().as_secs_f64())
}

fn argmax(v: &[f32]) -> usize {
    (0..v.len())
        .max_by(|&a, &b| v[a].total_cmp(&v[b]))
        .expect("non-empty")
}

/// Median |u − u*|, argmax-η hit rate on one-hot voxels, median max η on
/// mixture voxels.
fn recovery_metrics(run: &Recovery) -> (f64, f64, f64) {
    let coords = run.ds.voxels.coords();
    let mut rng = SeededRng::new(0);
    let u = run
        .job
        .model
        .retina_map(&coords, false, &mut rng)
        .expect("mapper");
    let eta = run.job.model.layer_select(&coords).expect("selector");
    let mut dist = Vec::new();
    let (mut hits, mut onehot) = (0usize, 0usize);
    let mut max_eta_mixed = Vec::new();
    for (i, v) in run.gt.voxels.iter().enumerate() {
        let (dx, dy) = (
            (u.data()[2 * i] - v.u[0]) as f64,
            (u.data()[2 * i + 1] - v.u[1]) as f64,
        );
        dist.push((dx * dx + dy * dy).sqrt());
        let e = eta.slab(i);
        if v.eta.iter().filter(|&&x| x > 0.0).count() == 1 {
            onehot += 1;
            hits += usize::from(argmax(e) == argmax(&v.eta));
        } else {
            max_eta_mixed.push(e.iter().copied().fold(0.0f32, f32::max) as f64);
        }
    }
    (
        median(&dist),
        hits as f64 / onehot as f64,
        median(&max_eta_mixed),
    )
}

fn recovery(report: &mut Report, soups: &mut Soups) -> Recovery {
    let (run, secs) = recovery_run(3e-5);
    soups.add(&run.job);
    let (dist, hit, max_eta) = recovery_metrics(&run);
    report.record(Check::below(
        "retina mapper: median |u - u*| (all 300 voxels)",
        dist,
        0.15,
    ));
    report.record(Check::below("retina mapper: runtime (s)", secs, 600.0));
    report.record(Check::above(
        "layer selector: argmax eta matches planted layer (one-hot voxels)",
        hit,
        0.9,
    ));
    report.record(Check::below(
        "layer selector: median max eta on mixture voxels, entropy weight 3e-5",
        max_eta,
        0.99,
    ));

    let (plain, _) = recovery_run(0.0);
    soups.add(&plain.job);
    let (dist0, _, max_eta0) = recovery_metrics(&plain);
    report.note(format!("entropy weight 0: median |u - u*| {dist0:.4}"));
    report.record(Check::above(
        "layer selector: median max eta on mixture voxels, entropy weight 0",
        max_eta0,
        0.99,
    ));
    run
}

// ----------------------------------------------------------------- ceilings

fn ceilings(report: &mut Report, run: &Recovery) {
    let ceil: Vec<f64> = run
        .gt
        .voxels
        .iter()
        .map(|v| oracle_ceiling(v.snr.0, run.gt.n_reps) as f64)
        .collect();
    let r = &run.job.test_r;
    let under = r
        .iter()
        .zip(&ceil)
        .filter(|(r, c)| **r <= **c + 0.05)
        .count() as f64
        / r.len() as f64;
    report.record(Check::at_least(
        "ceiling: fraction of voxels with test r <= ceiling + 0.05",
        under,
        0.99,
    ));
    // every voxel of this brain is in the high-SNR group
    let norm: Vec<f64> = noise_normalized(r, &ceil, NormConvention::Ratio)
        .expect("normalise")
        .into_iter()
        .flatten()
        .collect();
    report.record(Check::within(
        "ceiling: median noise-normalised r, high-SNR group",
        median(&norm),
        0.5,
        1.05,
    ));
}

// ----------------------------------------------------------------- ablation

fn ablation(report: &mut Report, soups: &mut Soups) {
    for field in [FieldMode::Smooth, FieldMode::Uniform] {
        let mut spec = SynthSpec::simple(1000, 4, 8, 8, 200, 4.0);
        spec.field = field;
        spec.seed = 5;
        let (ds, _) = generate(&spec).expect("synth");
        let cfg = train_config(60);
        let mut score = |name: &str, frozen_rm: bool, frozen_ls: bool| {
            let ms = ModelSpec {
                frozen_rm,
                frozen_ls,
                ..ModelSpec::default()
            };
            let job = train_full(&ds, &ms, &cfg, 7, &format!("{field:?} {name}"));
            soups.add(&job);
            job.mean_test_r()
        };
        let full = score("full", false, false);
        let frozen_rm = score("frozen mapper", true, false);
        match field {
            FieldMode::Smooth => {
                let frozen_ls = score("frozen selector", false, true);
                report.note(format!(
                    "retinotopic: full {full:.4}, frozen mapper {frozen_rm:.4}, frozen selector {frozen_ls:.4}"
                ));
                report.record(Check::at_least(
                    "ablation: full - frozen mapper (retinotopic)",
                    full - frozen_rm,
                    0.02,
                ));
                report.record(Check::at_least(
                    "ablation: full - frozen selector (retinotopic)",
                    full - frozen_ls,
                    0.01,
                ));
            }
            FieldMode::Uniform => {
                report.note(format!(
                    "uniform: full {full:.4}, frozen mapper {frozen_rm:.4}"
                ));
                report.record(Check::below(
                    "ablation: full - frozen mapper (uniform field)",
                    full - frozen_rm,
                    0.01,
                ));
            }
        }
    }
}

// ---------------------------------------------------------------- AFO order

/// Three ROIs, one weight family each, with strongly unequal SNR and few
/// images: the regime where helper voxels carry information a single ROI
/// cannot supply on its own.
fn recipe_spec() -> SynthSpec {
    let mut spec = SynthSpec::simple(200, 4, 8, 8, 0, 1.0);
    spec.groups = [8.0, 1.0, 0.25]
        .iter()
        .enumerate()
        .map(|(k, &snr)| VoxelGroup {
            roi: Some(format!("R{k}")),
            family: Some(k),
            ..VoxelGroup::new(40, snr)
        })
        .collect();
    spec.seed = 11;
    spec
}

fn recipe_order(report: &mut Report, soups: &mut Soups) {
    let (ds, _) = generate(&recipe_spec()).expect("synth");
    let mut plan = RecipePlan::uniform(ModelSpec::default(), train_config(300), 3);
    plan.workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(4);
    let parc = Parcellation::from_voxel_rois(&ds.voxels).expect("parcellation");
    let t = Instant::now();
    let naive = naive_mix(&ds, &plan, &parc).expect("naive mix");
    let s1 = run_stage1(&ds, &plan, &parc).expect("stage 1");
    let s2 = run_stage2(&ds, &plan, &parc, &s1).expect("stage 2");
    let s3 = run_stage3(&ds, &plan, &parc, &s2).expect("stage 3");
    let secs = t.elapsed().as_secs_f64();
    let no_dk = {
        let mut p = plan.clone();
        p.variant.no_dk = true;
        run_stage2(&ds, &p, &parc, &s1).expect("no-DK stage 2")
    };
    let rand = make_rand_roi(&parc, 99);
    let r1 = run_stage1(&ds, &plan, &rand).expect("randROI stage 1");
    let r2 = run_stage2(&ds, &plan, &rand, &r1).expect("randROI stage 2");
    for job in [&naive, &s3]
        .into_iter()
        .chain(s1.jobs.iter())
        .chain(&s2.jobs)
        .chain(&no_dk.jobs)
        .chain(&r1.jobs)
        .chain(&r2.jobs)
    {
        soups.add(job);
    }

    let (n, a, b, c, d) = (
        naive.mean_test_r(),
        s1.mean_test_r(),
        s2.mean_test_r(),
        s3.mean_test_r(),
        no_dk.mean_test_r(),
    );
    let (ra, rb) = (r1.mean_test_r(), r2.mean_test_r());
    report.note(format!(
        "mean test r: naive {n:.4}, S1 {a:.4}, S2 {b:.4}, S3 {c:.4}, no-DK {d:.4}; randROI S1 {ra:.4}, S2 {rb:.4}"
    ));
    report.record(Check::at_least("recipe: S2 - S1", b - a, 0.005));
    report.record(Check::at_least("recipe: S3 - naive mix", c - n, 0.005));
    report.record(Check::at_most("recipe: |S3 - S2|", (c - b).abs(), 0.01));
    report.record(Check::at_most("recipe: no-DK - S1", d - a, 0.003));
    report.record(Check::below(
        "recipe: randROI S1->S2 gain minus ROI S1->S2 gain",
        (rb - ra) - (b - a),
        0.0,
    ));
    report.record(Check::below(
        format!(
            "recipe: naive + S1..S3 runtime (s, {} workers)",
            plan.workers
        ),
        secs,
        1800.0,
    ));
}

// -------------------------------------------------------------------- veROI

/// Geometric midpoint of the largest ratio between consecutive merge
/// distances: the cut that separates tight clusters from the joins between
/// them, without knowing how many there are.
fn largest_gap_threshold(d: &Dendrogram) -> f64 {
    let mut h: Vec<f64> = d.merges.iter().map(|m| m.distance.max(1e-12)).collect();
    h.sort_by(f64::total_cmp);
    (1..h.len())
        .max_by(|&i, &j| (h[i] / h[i - 1]).total_cmp(&(h[j] / h[j - 1])))
        .map_or(f64::INFINITY, |i| (h[i] * h[i - 1]).sqrt())
}

fn veroi(report: &mut Report, soups: &mut Soups) {
    let mut spec = SynthSpec::simple(400, 4, 8, 8, 0, 4.0);
    spec.groups = (0..3)
        .map(|k| VoxelGroup {
            family: Some(k),
            ..VoxelGroup::new(40, 4.0)
        })
        .collect();
    spec.seed = 21;
    let (ds, gt) = generate(&spec).expect("synth");
    let models: Vec<EncoderModel<f32>> = (0..3)
        .map(|s| {
            let cfg = TrainConfig {
                seed: s,
                ..train_config(60)
            };
            let job = train_full(
                &ds,
                &ModelSpec::default(),
                &cfg,
                7,
                &format!("veROI model {s}"),
            );
            soups.add(&job);
            job.model
        })
        .collect();
    let w = average_head_weights(&models).expect("weights");
    let dim = models[0].head_w.shape()[1];
    let probe = build_veroi(&w, dim, &VeroiConfig::new(0.0)).expect("veROI");
    let threshold = largest_gap_threshold(&probe.dendrogram);
    let res = build_veroi(&w, dim, &VeroiConfig::new(threshold)).expect("veROI");
    let planted: Vec<usize> = gt
        .voxels
        .iter()
        .map(|v| v.family.expect("family"))
        .collect();
    let ari = adjusted_rand_index(&res.labels, &planted);
    report.note(format!("{} ROIs at threshold {threshold:.4}", res.n_rois));
    report.record(Check::above("veROI: ARI vs planted families", ari, 0.9));

    let parc = Parcellation::from_labels(&ds.voxels, res.labels, "veroi").expect("parcellation");
    let rand = make_rand_roi(&parc, 99);
    let (mut a, mut b) = (parc.sizes(), rand.sizes());
    a.sort_unstable();
    b.sort_unstable();
    report.record(Check::new(
        "veROI: randROI size multiset",
        format!("{b:?}"),
        format!("= {a:?}"),
        a == b,
    ));
}

// ----------------------------------------------------------------- decoding

fn decoding_set(groups: Vec<VoxelGroup>) -> Dataset {
    let mut spec = SynthSpec::simple(1000, 4, 8, 8, 0, 1.0);
    spec.groups = groups;
    spec.split_ratio = [70, 15, 15];
    spec.seed = 31;
    generate(&spec).expect("synth").0
}

/// Top-1 accuracy over the first 100 test images, whole brain and per ROI.
fn decode(ds: &Dataset, soups: &mut Soups, name: &str) -> (f64, BTreeMap<String, f64>) {
    let job = train_full(ds, &ModelSpec::default(), &train_config(60), 7, name);
    soups.add(&job);
    let [_, _, test] = ds.split_indices().expect("split");
    let images = &test[..100];
    let voxels = all_voxels(ds);
    let set = CandidateSet::predict(
        &job.model,
        &ds.features,
        images,
        &ds.voxels.coords(),
        &voxels,
    )
    .expect("candidates");
    let queries: Vec<f32> = images
        .iter()
        .flat_map(|&i| ds.responses.row(i).to_vec())
        .collect();
    let truth: Vec<usize> = (0..images.len()).collect();
    let rep = decode_report(
        &set,
        &queries,
        &truth,
        &voxelcast_core::trainer::roi_groups(ds),
    )
    .expect("decode");
    (
        rep.all.top1,
        rep.per_roi.into_iter().map(|(k, v)| (k, v.top1)).collect(),
    )
}

fn decoding(report: &mut Report, soups: &mut Soups) {
    let clean = decoding_set(vec![VoxelGroup {
        snr: Snr::INF,
        ..VoxelGroup::new(120, 1.0)
    }]);
    let (top1, _) = decode(&clean, soups, "decode snr=inf");
    report.record(Check::at_least(
        "decoding: top-1 over 100 candidates, noise-free",
        top1,
        1.0,
    ));

    let noisy = decoding_set(vec![VoxelGroup::new(120, 1.0)]);
    let (top1, _) = decode(&noisy, soups, "decode snr=1");
    report.record(Check::above(
        "decoding: top-1 over 100 candidates, snr 1 (25x chance)",
        top1,
        0.25,
    ));

    let snrs = [4.0, 1.0, 0.25];
    let graded = decoding_set(
        snrs.iter()
            .enumerate()
            .map(|(k, &s)| VoxelGroup {
                roi: Some(format!("R{k}")),
                ..VoxelGroup::new(40, s)
            })
            .collect(),
    );
    let (_, per_roi) = decode(&graded, soups, "decode by ROI");
    let acc: Vec<f64> = (0..snrs.len()).map(|k| per_roi[&format!("R{k}")]).collect();
    let ordered = acc.windows(2).all(|w| w[0] > w[1]);
    report.record(Check::new(
        "decoding: ROI-conditioned top-1 follows ROI SNR (4 > 1 > 0.25)",
        format!("{acc:.3?}"),
        "strictly decreasing",
        ordered,
    ));
}

// ------------------------------------------------------------- determinism

fn run_once(dir: &Path) {
    let mut spec = SynthSpec::simple(120, 2, 4, 4, 12, 2.0);
    spec.seed = 41;
    let (ds, _) = generate(&spec).expect("synth");
    let ms = ModelSpec {
        hidden: 16,
        pooled_hidden: 8,
        ..ModelSpec::default()
    };
    let job = train_full(&ds, &ms, &train_config(5), 3, "determinism");
    job.model.save(&dir.join("model.ckpt"), true).expect("save");
    let meta = ReportMeta {
        model_id: "determinism".into(),
        split: "test".into(),
        seed: 3,
    };
    emit_reports(&job.model, &ds, &all_voxels(&ds), dir, meta, None).expect("reports");
}

fn determinism(report: &mut Report) {
    let (a, b) = (
        tempfile::tempdir().expect("tmp"),
        tempfile::tempdir().expect("tmp"),
    );
    run_once(a.path());
    run_once(b.path());
    for file in ["model.ckpt", "scores.csv"] {
        let same = fs::read(a.path().join(file)).expect("read")
            == fs::read(b.path().join(file)).expect("read");
        report.record(Check::new(
            format!("determinism: {file} from two identical runs"),
            if same { "identical" } else { "differs" },
            "byte-identical",
            same,
        ));
    }

    let ckpt = a.path().join("model.ckpt");
    let model = EncoderModel::<f32>::load(&ckpt).expect("load");
    let again = a.path().join("again.ckpt");
    model.save(&again, true).expect("save");
    let same = fs::read(&ckpt).expect("read") == fs::read(&again).expect("read");
    report.record(Check::new(
        "formats: checkpoint save/load/save",
        if same { "identical" } else { "differs" },
        "bit-exact",
        same,
    ));

    let mut spec = SynthSpec::simple(30, 3, 5, 6, 4, 1.0);
    spec.seed = 42;
    let (ds, _) = generate(&spec).expect("synth");
    let dir = tempfile::tempdir().expect("tmp");
    write_feature_store(&ds.features, dir.path()).expect("write");
    let back = read_feature_store(dir.path()).expect("read");
    let bits = |s: &[f32]| s.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let same =
        back.image_ids == ds.features.image_ids && bits(back.data()) == bits(ds.features.data());
    report.record(Check::new(
        "formats: feature store write/read",
        if same { "identical" } else { "differs" },
        "bit-exact",
        same,
    ));
}

// --------------------------------------------------------------------- main

fn main() {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let wants = |key: &str| filters.is_empty() || filters.iter().any(|f| key.contains(f.as_str()));
    let t = Instant::now();
    let mut report = Report::default();
    let mut soups = Soups::default();

    if wants("gradients") {
        gradient_suite(&mut report);
    }
    if wants("recovery") || wants("ceiling") {
        let run = recovery(&mut report, &mut soups);
        ceilings(&mut report, &run);
    }
    if wants("ablation") {
        ablation(&mut report, &mut soups);
    }
    if wants("recipe") {
        recipe_order(&mut report, &mut soups);
    }
    if wants("veroi") {
        veroi(&mut report, &mut soups);
    }
    if wants("decoding") {
        decoding(&mut report, &mut soups);
    }
    if wants("determinism") {
        determinism(&mut report);
    }
    if !soups.0.is_empty() {
        let worse: Vec<String> = soups
            .0
            .iter()
            .filter(|(_, soup, single)| soup < single)
            .map(|(n, soup, single)| format!("{n}: {soup:.5} < {single:.5}"))
            .collect();
        report.record(Check::new(
            "soup: validation r >= best single checkpoint on every run",
            if worse.is_empty() {
                format!("{} runs", soups.0.len())
            } else {
                worse.join("; ")
            },
            "no exceptions",
            worse.is_empty(),
        ));
    }

    let failures = report.failures();
    println!(
        "\n{} checks, {} failed, {:.0}s",
        report.checks.len(),
        failures.len(),
        t.elapsed().as_secs_f64()
    );
    for f in &failures {
        println!("  failed: {}", f.name);
    }
    if !failures.is_empty() {
        std::process::exit(1);
    }
}
