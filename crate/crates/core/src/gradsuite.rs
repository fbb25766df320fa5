//! The gradient verification suite: every differentiable kernel and the
//! full training objective against central finite differences, on seeded
//! random instances with f32 parameters and f64 reference evaluation.

use std::time::Instant;

use serde::Serialize;

use crate::encoder::{EncoderConfig, EncoderModel, ModelObjective};
use crate::numcore::ops::{
    affine, affine_backward, layernorm, layernorm_backward, softmax_rows, softmax_rows_backward,
    tanh_act, tanh_backward, ChannelAxis,
};
use crate::numcore::{
    bilinear_sample, bilinear_sample_backward, conv2d_same, conv2d_same_backward, global_pools,
    global_pools_backward, grad_check, neg_entropy, smooth_l1, GradCheckConfig, GradCheckReport,
    Param, ParamObjective, SeededRng, Tensor,
};
use crate::synth::{generate, SynthSpec};
use crate::trainer::fit::{batch_objective, draw_voxels, Batch, TrainData};
use crate::trainer::{StageRole, TrainConfig};

/// One check: a named kernel on one seeded instance.
pub type Check = fn(u64) -> GradCheckReport;

/// Every check in the suite, by name.
pub const CHECKS: [(&str, Check); 11] = [
    ("affine", affine_check),
    ("tanh", tanh_check),
    ("softmax", softmax_check),
    ("layernorm_first", |s| {
        layernorm_check(s, ChannelAxis::First)
    }),
    ("layernorm_last", |s| layernorm_check(s, ChannelAxis::Last)),
    ("conv5x5", conv_check),
    ("bilinear_sample", bilinear_check),
    ("global_pools", pools_check),
    ("smooth_l1", smooth_l1_check),
    ("neg_entropy_softmax", entropy_check),
    ("training_objective", objective_check),
];

#[derive(Clone, Debug, Serialize)]
pub struct SuiteCase {
    pub name: &'static str,
    pub seed: u64,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
    pub seconds: f64,
    pub detail: String,
}

/// Runs every check on seeds `0..instances`.
pub fn run_suite(instances: u64) -> Vec<SuiteCase> {
    let mut out = Vec::new();
    for (name, check) in CHECKS {
        for seed in 0..instances {
            let t = Instant::now();
            let r = check(seed);
            out.push(SuiteCase {
                name,
                seed,
                checked: r.checked,
                max_rel_err: r.max_rel_err,
                passed: r.passed(),
                seconds: t.elapsed().as_secs_f64(),
                detail: r.to_string(),
            });
        }
    }
    out
}

fn randn(shape: &[usize], rng: &mut SeededRng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.normal() as f32)
}

fn cast_params(ps: &[Param<f32>]) -> Vec<Param<f64>> {
    ps.iter().map(Param::cast).collect()
}

/// f64 weighted sum used as a scalar probe of a tensor-valued op.
fn probe(y: &Tensor<f64>, c: &[f64]) -> f64 {
    y.data().iter().zip(c).map(|(a, b)| a * b).sum()
}

fn cfg(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    }
}

pub fn affine_check(seed: u64) -> GradCheckReport {
    let mut rng = SeededRng::new(100 + seed);
    let xp = Param::new("x", randn(&[3, 4], &mut rng));
    let w = Param::new("W", randn(&[4, 2], &mut rng));
    let b = Param::new("b", randn(&[2], &mut rng));
    let c: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
    let c2 = c.clone();
    let mut obj = ParamObjective::new(
        vec![xp, w, b],
        move |ps: &[Param<f32>]| {
            let p = cast_params(ps);
            probe(&affine(&p[0].value, &p[1], &p[2]).unwrap(), &c)
        },
        move |ps: &mut [Param<f32>]| {
            let dy = Tensor::from_fn(&[3, 2], |i| c2[i] as f32);
            let x = ps[0].value.clone();
            let (head, rest) = ps.split_at_mut(1);
            let (w, b) = rest.split_at_mut(1);
            head[0].grad = affine_backward(&x, &dy, &mut w[0], &mut b[0], true).unwrap();
        },
    );
    grad_check(&mut obj, &cfg(seed))
}

pub fn tanh_check(seed: u64) -> GradCheckReport {
    let mut rng = SeededRng::new(200 + seed);
    let xp = Param::new("x", randn(&[4, 3], &mut rng));
    let c: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
    let c2 = c.clone();
    let mut obj = ParamObjective::new(
        vec![xp],
        move |ps: &[Param<f32>]| probe(&tanh_act(&ps[0].value.cast::<f64>()), &c),
        move |ps: &mut [Param<f32>]| {
            let y = tanh_act(&ps[0].value);
            let dy = Tensor::from_fn(&[4, 3], |i| c2[i] as f32);
            ps[0].grad = tanh_backward(&y, &dy);
        },
    );
    grad_check(&mut obj, &cfg(seed))
}

pub fn softmax_check(seed: u64) -> GradCheckReport {
    let mut rng = SeededRng::new(300 + seed);
    let xp = Param::new("x", randn(&[3, 4], &mut rng));
    let c: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
    let c2 = c.clone();
    let mut obj = ParamObjective::new(
        vec![xp],
        move |ps: &[Param<f32>]| probe(&softmax_rows(&ps[0].value.cast::<f64>()), &c),
        move |ps: &mut [Param<f32>]| {
            let y = softmax_rows(&ps[0].value);
            let dy = Tensor::from_fn(&[3, 4], |i| c2[i] as f32);
            ps[0].grad = softmax_rows_backward(&y, &dy);
        },
    );
    grad_check(&mut obj, &cfg(seed))
}

pub fn layernorm_check(seed: u64, axis: ChannelAxis) -> GradCheckReport {
    let mut rng = SeededRng::new(400 + seed);
    // with only a few channels per row the normalised output is sharply
    // curved and central differences at h = 1e-3 lose accuracy
    let (shape, c) = match axis {
        ChannelAxis::First => ([4usize, 3, 2], 4),
        ChannelAxis::Last => ([3usize, 1, 8], 8),
    };
    let xp = Param::new("x", randn(&shape, &mut rng));
    let g = Param::new("gamma", randn(&[c], &mut rng));
    let b = Param::new("beta", randn(&[c], &mut rng));
    let coef: Vec<f64> = (0..24).map(|_| rng.normal()).collect();
    let coef2 = coef.clone();
    let mut obj = ParamObjective::new(
        vec![xp, g, b],
        move |ps: &[Param<f32>]| {
            let p = cast_params(ps);
            probe(
                &layernorm(&p[0].value, &p[1], &p[2], 1e-5, axis).unwrap().0,
                &coef,
            )
        },
        move |ps: &mut [Param<f32>]| {
            let x = ps[0].value.clone();
            let (head, tail) = ps.split_at_mut(1);
            let (g, b) = tail.split_at_mut(1);
            let (_, cache) = layernorm(&x, &g[0], &b[0], 1e-5, axis).unwrap();
            let dy = Tensor::from_fn(&shape, |i| coef2[i] as f32);
            head[0].grad = layernorm_backward(&cache, &dy, &mut g[0], &mut b[0]);
        },
    );
    grad_check(&mut obj, &cfg(seed))
}

pub fn conv_check(seed: u64) -> GradCheckReport {
    let mut rng = SeededRng::new(500 + seed);
    let (cin, cout, g) = (2, 3, 4 + seed as usize % 3);
    let xp = Param::new("x", randn(&[cin, g, g], &mut rng));
    let kp = Param::new("K", randn(&[cout, cin, 5, 5], &mut rng));
    let bp = Param::new("b", randn(&[cout], &mut rng));
    let c: Vec<f64> = (0..cout * g * g).map(|_| rng.normal()).collect();
    let c2 = c.clone();
    let mut obj = ParamObjective::new(
        vec![xp, kp, bp],
        move |ps: &[Param<f32>]| {
            let p = cast_params(ps);
            probe(&conv2d_same(&p[0].value, &p[1], &p[2]).unwrap().0, &c)
        },
        move |ps: &mut [Param<f32>]| {
            let x = ps[0].value.clone();
            let (head, rest) = ps.split_at_mut(1);
            let (k, b) = rest.split_at_mut(1);
            let (_, cache) = conv2d_same(&x, &k[0], &b[0]).unwrap();
            let dy = Tensor::from_fn(&[cout, g, g], |i| c2[i] as f32);
            head[0].grad = conv2d_same_backward(&cache, &dy, &mut k[0], &mut b[0], true).unwrap();
        },
    );
    grad_check(&mut obj, &cfg(seed))
}

pub fn bilinear_check(seed: u64) -> GradCheckReport {
    let mut rng = SeededRng::new(600 + seed);
    let (d, g, n) = (3, 5, 4);
    let mp = Param::new("M", randn(&[d, g, g], &mut rng));
    // keep coordinates away from cell boundaries so the kinks are not straddled
    let up = Param::new(
        "u",
        Tensor::from_fn(&[n, 2], |_| {
            let cellpos = rng.below(4) as f64 + rng.uniform_in(0.1, 0.9);
            (cellpos / 2.0 - 1.0) as f32
        }),
    );
    let c: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
    let c2 = c.clone();
    let mut obj = ParamObjective::new(
        vec![mp, up],
        move |ps: &[Param<f32>]| {
            probe(
                &bilinear_sample(&ps[0].value.cast::<f64>(), &ps[1].value.cast()).unwrap(),
                &c,
            )
        },
        move |ps: &mut [Param<f32>]| {
            let dy = Tensor::from_fn(&[n, d], |i| c2[i] as f32);
            let (dm, du) = bilinear_sample_backward(&ps[0].value, &ps[1].value, &dy);
            ps[0].grad = dm;
            ps[1].grad = du;
        },
    );
    grad_check(&mut obj, &cfg(seed))
}

pub fn pools_check(seed: u64) -> GradCheckReport {
    let mut rng = SeededRng::new(700 + seed);
    let mp = Param::new("M", randn(&[3, 4, 4], &mut rng));
    let c: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
    let c2 = c.clone();
    let mut obj = ParamObjective::new(
        vec![mp],
        move |ps: &[Param<f32>]| probe(&global_pools(&ps[0].value.cast::<f64>()).unwrap().0, &c),
        move |ps: &mut [Param<f32>]| {
            let (_, cache) = global_pools(&ps[0].value).unwrap();
            let dy: Vec<f32> = c2.iter().map(|&v| v as f32).collect();
            let mut dm = vec![0.0f32; 48];
            global_pools_backward(&cache, &dy, &mut dm);
            ps[0].grad = Tensor::from_vec(&[3, 4, 4], dm).unwrap();
        },
    );
    grad_check(&mut obj, &cfg(seed))
}

pub fn smooth_l1_check(seed: u64) -> GradCheckReport {
    let mut rng = SeededRng::new(800 + seed);
    let target = randn(&[3, 4], &mut rng);
    let tgt = target.clone();
    let pred = Param::new("pred", randn(&[3, 4], &mut rng));
    let mut obj = ParamObjective::new(
        vec![pred],
        move |ps: &[Param<f32>]| {
            smooth_l1(&ps[0].value.cast::<f64>(), &tgt.cast(), 0.5)
                .unwrap()
                .0
        },
        move |ps: &mut [Param<f32>]| ps[0].grad = smooth_l1(&ps[0].value, &target, 0.5).unwrap().1,
    );
    grad_check(&mut obj, &cfg(seed))
}

pub fn entropy_check(seed: u64) -> GradCheckReport {
    let mut rng = SeededRng::new(900 + seed);
    let logits = Param::new("z", randn(&[3, 4], &mut rng));
    let mut obj = ParamObjective::new(
        vec![logits],
        |ps: &[Param<f32>]| neg_entropy(&softmax_rows(&ps[0].value.cast::<f64>())).0,
        |ps: &mut [Param<f32>]| {
            let eta = softmax_rows(&ps[0].value);
            let (_, g) = neg_entropy(&eta);
            ps[0].grad = softmax_rows_backward(&eta, &g);
        },
    );
    grad_check(&mut obj, &cfg(seed))
}

/// The whole training objective — adapter, pooled branch, mapper with
/// jitter, selector, bilinear readout, heads, both regression terms and
/// the entropy term — over a random minibatch of a small synthetic brain.
pub fn objective_check(seed: u64) -> GradCheckReport {
    let mut spec = SynthSpec::simple(30, 2, 4, 4, 5, 2.0);
    spec.seed = 10 + seed;
    let ds = generate(&spec).expect("valid synthetic spec").0;
    let mut rng = SeededRng::new(seed);
    let f = &ds.features;
    let mut model = EncoderModel::<f32>::new(
        EncoderConfig {
            hidden: 8,
            pooled_hidden: 6,
            pe_freqs: 2,
            sigma: 0.05,
            ..EncoderConfig::new(f.layers, f.channels, 3, f.grid)
        },
        ds.voxels.len(),
        seed,
    )
    .expect("valid encoder config");
    for p in model.params_mut() {
        for v in p.value.data_mut() {
            *v += 0.3 * rng.normal() as f32;
        }
    }
    let n = ds.voxels.len();
    let mut role = StageRole::full(&ds);
    role.gt = vec![true, true, false, true, false];
    role.dk = vec![false, true, true, false, true];
    role.teacher = Some((0..f.n_images() * n).map(|_| rng.normal() as f32).collect());
    let tc = TrainConfig {
        lambda_dk: 0.7,
        lambda_ent: 0.05,
        beta_smoothl1: 0.5,
        ..TrainConfig::default()
    };
    let coords = ds.voxels.coords();
    let u = model
        .cast::<f64>()
        .topy_forward(&coords)
        .expect("coords match")
        .u;
    let (g, sigma) = (model.config.grid, model.config.sigma as f64);
    // Bilinear sampling is piecewise linear in u: redraw the minibatch and
    // jitter until no sample sits within finite-difference reach of a grid
    // line or the clamp.
    let (batch, noise) = loop {
        let images: Vec<usize> = (0..3).map(|_| rng.below(f.n_images())).collect();
        let voxels: Vec<Vec<usize>> = images
            .iter()
            .map(|_| draw_voxels(&[0, 1, 2, 3, 4], 3, &mut rng))
            .collect();
        let batch = Batch { images, voxels };
        let noise: Vec<f64> = (0..batch.voxels.iter().map(|v| 2 * v.len()).sum())
            .map(|_| rng.normal())
            .collect();
        let mut at = 0;
        let mut clear = true;
        for &v in batch.voxels.iter().flatten() {
            for a in 0..2 {
                let z = u.data()[2 * v + a] + sigma * noise[at];
                at += 1;
                let pos = (z + 1.0) / 2.0 * (g - 1) as f64;
                clear &= (pos - pos.round()).abs() > 0.02 && z.abs() < 0.99;
            }
        }
        if clear {
            break (batch, noise);
        }
    };
    let data = TrainData {
        ds: &ds,
        coords: coords.clone(),
        role: &role,
    };
    let data2 = TrainData {
        ds: &ds,
        coords,
        role: &role,
    };
    let (b2, n2, c2) = (batch.clone(), noise.clone(), tc.clone());
    let mut obj = ModelObjective::new(
        model,
        move |m: &EncoderModel<f64>| {
            batch_objective(&mut m.clone(), &data, &batch, &noise, &tc, false)
                .expect("objective evaluates")
                .total
        },
        move |m: &mut EncoderModel<f32>| {
            batch_objective(m, &data2, &b2, &n2, &c2, true).expect("objective evaluates");
        },
    );
    grad_check(
        &mut obj,
        &GradCheckConfig {
            seed,
            coords_per_param: 10,
            ..GradCheckConfig::default()
        },
    )
}
