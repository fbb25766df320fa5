use super::stage::{stage1_role, stage2_role};
use super::*;
use crate::data::{read_matrix, Dataset};
use crate::encoder::ModelSpec;
use crate::synth::{generate, SynthSpec, VoxelGroup};
use crate::trainer::TrainConfig;
use crate::veroi::Parcellation;

fn three_roi_dataset(seed: u64) -> Dataset {
    let mut spec = SynthSpec::simple(48, 2, 4, 4, 0, 3.0);
    spec.groups = ["a", "b", "c"]
        .iter()
        .zip([2usize, 3, 2])
        .map(|(name, count)| VoxelGroup {
            roi: Some(name.to_string()),
            ..VoxelGroup::new(count, 3.0)
        })
        .collect();
    spec.seed = seed;
    generate(&spec).unwrap().0
}

fn quick_plan(seed: u64) -> RecipePlan {
    let model = ModelSpec {
        hidden: 8,
        pooled_hidden: 6,
        pe_freqs: 2,
        out_dim: Some(3),
        ..ModelSpec::default()
    };
    let train = TrainConfig {
        batch: 8,
        epoch_fraction: 0.25,
        max_epochs: 2,
        soup_top_k: 2,
        ..TrainConfig::default()
    };
    RecipePlan::uniform(model, train, seed)
}

#[test]
fn rand_roi_keeps_sizes_and_is_seeded() {
    let ds = three_roi_dataset(0);
    let parc = Parcellation::from_voxel_rois(&ds.voxels).unwrap();
    let a = make_rand_roi(&parc, 5);
    let mut sa = a.sizes();
    let mut sp = parc.sizes();
    sa.sort_unstable();
    sp.sort_unstable();
    assert_eq!(sa, sp);
    assert_eq!(a, make_rand_roi(&parc, 5));
    assert!((0..20).any(|s| make_rand_roi(&parc, s).labels != a.labels));
}

#[test]
fn one_roi_stage2_has_no_helpers() {
    let ds = three_roi_dataset(1);
    let parc = Parcellation::single(&ds.voxels, "all");
    let s1 = stage1_role(&ds, &parc, 0);
    let s2 = stage2_role(
        &ds,
        &parc,
        0,
        Some(vec![0.0; ds.features.n_images() * ds.voxels.len()]),
    );
    assert_eq!(s1.gt, vec![true; ds.voxels.len()]);
    assert_eq!((s1.gt, s1.dk, s1.condition), (s2.gt, s2.dk, s2.condition));
    assert!(s2.teacher.is_none());
}

#[test]
fn stage2_role_distils_everything_outside_the_target() {
    let ds = three_roi_dataset(2);
    let parc = Parcellation::from_voxel_rois(&ds.voxels).unwrap();
    let role = stage2_role(
        &ds,
        &parc,
        1,
        Some(vec![0.0; ds.features.n_images() * ds.voxels.len()]),
    );
    let target = parc.members(1);
    for v in 0..ds.voxels.len() {
        assert_eq!(role.gt[v], target.contains(&v));
        assert_eq!(role.dk[v], !target.contains(&v));
    }
    assert_eq!(role.condition, target);
}

#[test]
fn recipe_covers_every_voxel_and_accounts_parameters() {
    let ds = three_roi_dataset(3);
    let parc = Parcellation::from_voxel_rois(&ds.voxels).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let plan = RecipePlan {
        workers: 2,
        ..quick_plan(7)
    };
    let out = run_recipe(&ds, &plan, &parc, Some(dir.path())).unwrap();
    let s1 = out.stage1.as_ref().unwrap();
    assert_eq!(s1.jobs.len(), 3);
    assert_eq!(out.stage2.len(), 1);
    let [train, val, test] = ds.split_indices().unwrap();
    assert_eq!(s1.teacher_images.len(), train.len() + val.len());
    assert!(s1.teacher.iter().all(|v| v.is_finite()));
    for i in &test {
        assert!(!s1.teacher_images.contains(i));
    }

    // r trunks plus one head per voxel, against a single trunk
    let fin = out.final_model();
    let n = ds.voxels.len();
    let heads = n * (fin.model.config.out_dim + 1);
    let trunk = fin.model.param_count().total() - heads;
    assert_eq!(s1.param_count(), 3 * trunk + heads);
    assert_eq!(out.stage2[0].param_count(), 3 * trunk + heads);
    assert_eq!(fin.model.n_voxels(), n);

    for k in 0..3 {
        let (side, values) =
            read_matrix(&dir.path().join(format!("stage1/teacher_roi{k}.bin"))).unwrap();
        assert_eq!(side.cols, parc.sizes()[k]);
        assert_eq!(values.len(), side.rows * side.cols);
        assert!(dir.path().join(format!("stage2/roi{k}.ckpt")).exists());
    }
    let reloaded =
        crate::encoder::EncoderModel::<f32>::load(&dir.path().join("stage3/model.ckpt")).unwrap();
    assert_eq!(reloaded.n_voxels(), n);
}

#[test]
fn recipe_is_deterministic_across_worker_counts() {
    let ds = three_roi_dataset(4);
    let parc = Parcellation::from_voxel_rois(&ds.voxels).unwrap();
    let a = run_stage1(&ds, &quick_plan(3), &parc).unwrap();
    let b = run_stage1(
        &ds,
        &RecipePlan {
            workers: 3,
            ..quick_plan(3)
        },
        &parc,
    )
    .unwrap();
    assert_eq!(a.teacher, b.teacher);
}

#[test]
fn variants_select_the_right_path() {
    let ds = three_roi_dataset(5);
    let parc = Parcellation::from_voxel_rois(&ds.voxels).unwrap();
    let mut plan = quick_plan(1);
    plan.variant.naive_mix = true;
    let out = run_recipe(&ds, &plan, &parc, None).unwrap();
    assert!(out.stage1.is_none() && out.naive.is_some());

    let mut plan = quick_plan(1);
    plan.variant.extra_s2_iters = 1;
    plan.variant.rand_roi = true;
    let out = run_recipe(&ds, &plan, &parc, None).unwrap();
    assert_eq!(out.stage2.len(), 2);
    assert_ne!(out.parcellation.names, parc.names);
}

#[test]
fn failed_jobs_are_reported_together() {
    let ds = three_roi_dataset(6);
    let parc = Parcellation::from_voxel_rois(&ds.voxels).unwrap();
    let mut plan = quick_plan(0);
    plan.stage1.lr = f32::INFINITY;
    match run_stage1(&ds, &plan, &parc) {
        Err(e @ crate::error::Error::Jobs(3, _)) => assert!(e.is_numeric(), "{e}"),
        other => panic!(
            "expected three failed jobs, got {:?}",
            other.map(|s| s.jobs.len())
        ),
    }
}
