use super::*;
use crate::data::FeatureStore;
use crate::numcore::{grad_check, GradCheckConfig, SeededRng, Tensor};
use crate::scalar::Scalar;

fn small_config(l: usize, c: usize, d: usize, g: usize) -> EncoderConfig {
    EncoderConfig {
        hidden: 8,
        pooled_hidden: 6,
        pe_freqs: 2,
        ..EncoderConfig::new(l, c, d, g)
    }
}

fn random_raw(cfg: &EncoderConfig, rng: &mut SeededRng) -> Vec<f32> {
    (0..cfg.layers * cfg.in_channels * cfg.grid * cfg.grid)
        .map(|_| rng.normal() as f32)
        .collect()
}

fn random_coords(n: usize, rng: &mut SeededRng) -> Vec<[f32; 3]> {
    (0..n)
        .map(|_| {
            [
                rng.uniform_in(-1.0, 1.0) as f32,
                rng.uniform_in(-1.0, 1.0) as f32,
                rng.uniform_in(-1.0, 1.0) as f32,
            ]
        })
        .collect()
}

/// Perturbs every parameter so no component sits at its special init.
fn scramble<T: Scalar>(model: &mut EncoderModel<T>, rng: &mut SeededRng, scale: f64) {
    for p in model.params_mut() {
        for v in p.value.data_mut() {
            *v += T::of(scale * rng.normal());
        }
    }
}

/// `Σ c·ŷ` over images with fixed jitter draws `eps` (per image, `[V x 2]`).
fn probe_loss<T: Scalar>(
    model: &EncoderModel<T>,
    raws: &[Vec<f32>],
    coords: &[[f32; 3]],
    c: &[Vec<f64>],
    eps: &[Vec<f64>],
) -> f64 {
    let topy = model.topy_forward(coords).unwrap();
    let heads: Vec<usize> = (0..coords.len()).collect();
    let mut total = 0.0;
    for (i, raw) in raws.iter().enumerate() {
        let u: Vec<T> = topy
            .u
            .data()
            .iter()
            .zip(&eps[i])
            .map(|(u, e)| *u + T::of(model.config.sigma as f64 * e))
            .collect();
        let img = model.image_forward(raw).unwrap();
        let ro = model.readout(&img, &u, topy.eta.data(), &heads);
        total += ro
            .pred
            .iter()
            .zip(&c[i])
            .map(|(p, c)| p.to_f64_lossless() * c)
            .sum::<f64>();
    }
    total
}

fn probe_grad(
    model: &mut EncoderModel<f32>,
    raws: &[Vec<f32>],
    coords: &[[f32; 3]],
    c: &[Vec<f64>],
    eps: &[Vec<f64>],
) {
    let cfg = model.config.clone();
    let (l, d, g) = (cfg.layers, cfg.out_dim, cfg.grid);
    let n = coords.len();
    let topy = model.topy_forward(coords).unwrap();
    let heads: Vec<usize> = (0..n).collect();
    let mut du = vec![0.0f32; n * 2];
    let mut deta = vec![0.0f32; n * l];
    for (i, raw) in raws.iter().enumerate() {
        let u: Vec<f32> = topy
            .u
            .data()
            .iter()
            .zip(&eps[i])
            .map(|(u, e)| *u + (cfg.sigma as f64 * e) as f32)
            .collect();
        let img = model.image_forward(raw).unwrap();
        let ro = model.readout(&img, &u, topy.eta.data(), &heads);
        let dpred: Vec<f32> = c[i].iter().map(|v| *v as f32).collect();
        let mut dm = Tensor::zeros(&[l, d, g, g]);
        let mut dq = Tensor::zeros(&[l, d]);
        model.readout_backward(
            &img,
            &u,
            topy.eta.data(),
            &heads,
            &ro,
            &dpred,
            &mut du,
            &mut deta,
            &mut dm,
            &mut dq,
        );
        model.image_backward(&img, dm, &dq).unwrap();
    }
    let du = Tensor::from_vec(&[n, 2], du).unwrap();
    let deta = Tensor::from_vec(&[n, l], deta).unwrap();
    model.topy_backward(&topy, &du, &deta);
}

#[test]
fn zero_output_layers_give_center_and_uniform() {
    let mut rng = SeededRng::new(3);
    let cfg = small_config(3, 2, 2, 4);
    let model = EncoderModel::<f32>::new(cfg, 5, 1).unwrap();
    let coords = random_coords(5, &mut rng);
    let u = model.retina_map(&coords, false, &mut rng).unwrap();
    assert!(u.data().iter().all(|v| *v == 0.0));
    let eta = model.layer_select(&coords).unwrap();
    assert!(eta.data().iter().all(|v| (*v - 1.0 / 3.0).abs() < 1e-7));

    let one = EncoderModel::<f32>::new(small_config(1, 2, 2, 4), 5, 1).unwrap();
    assert!(one
        .layer_select(&coords)
        .unwrap()
        .data()
        .iter()
        .all(|v| *v == 1.0));
}

#[test]
fn retina_map_determinism_bounds_and_jitter_mean() {
    let mut rng = SeededRng::new(4);
    let mut model = EncoderModel::<f64>::new(small_config(2, 2, 2, 4), 3, 2).unwrap();
    scramble(&mut model, &mut rng, 0.5);
    let coords = random_coords(3, &mut rng);
    let a = model.retina_map(&coords, false, &mut rng).unwrap();
    let b = model.retina_map(&coords, false, &mut rng).unwrap();
    assert_eq!(a, b);
    assert!(a.data().iter().all(|v| v.abs() < 1.0));

    let draws = 10_000;
    let mut sum = vec![0.0f64; 6];
    for _ in 0..draws {
        let j = model.retina_map(&coords, true, &mut rng).unwrap();
        for (s, v) in sum.iter_mut().zip(j.data()) {
            *s += v;
            assert!(v.abs() <= U_LIMIT);
        }
    }
    let tol = 3.0 * 0.02 / (draws as f64).sqrt();
    for (s, u) in sum.iter().zip(a.data()) {
        assert!(
            (s / draws as f64 - u).abs() < tol * 1.5,
            "{} vs {u}",
            s / draws as f64
        );
    }
}

#[test]
fn jitter_is_clamped() {
    let mut rng = SeededRng::new(5);
    let (out, mask) = jitter(&[0.9999999f64, -0.9999999, 0.0], 1.0, &mut rng);
    assert!(out.iter().all(|v| v.abs() <= U_LIMIT));
    assert!(mask.iter().any(|m| !m) || out.iter().all(|v| v.abs() < U_LIMIT));
}

#[test]
fn selector_is_a_function_of_position() {
    let mut rng = SeededRng::new(6);
    let mut model = EncoderModel::<f64>::new(small_config(4, 2, 2, 4), 2, 2).unwrap();
    scramble(&mut model, &mut rng, 0.5);
    let p = [0.3f32, -0.2, 0.7];
    let eta = model.layer_select(&[p, p]).unwrap();
    assert_eq!(eta.slab(0), eta.slab(1));
    assert!((eta.slab(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn identity_adapter_passes_channels_through() {
    let mut rng = SeededRng::new(7);
    for g in [1, 3, 6] {
        let cfg = small_config(2, 3, 2, g);
        let mut model = EncoderModel::<f64>::new(cfg.clone(), 1, 0).unwrap();
        for blk in &mut model.adapter.blocks {
            blk.conv_k.value.fill(0.0);
        }
        let raw = random_raw(&cfg, &mut rng);
        let img = model.image_forward(&raw).unwrap();
        assert_eq!(img.m.shape(), &[2, 2, g, g]);
        for l in 0..2 {
            for ch in 0..2 {
                for k in 0..g * g {
                    let want = raw[(l * 3 + ch) * g * g + k] as f64;
                    assert!((img.m.slab(l)[ch * g * g + k] - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn readout_matches_naive_loops() {
    let mut rng = SeededRng::new(8);
    let cfg = small_config(3, 2, 3, 5);
    let mut model = EncoderModel::<f64>::new(cfg.clone(), 4, 1).unwrap();
    scramble(&mut model, &mut rng, 0.3);
    let img = model.image_forward(&random_raw(&cfg, &mut rng)).unwrap();
    let u: Vec<f64> = (0..8).map(|_| rng.uniform_in(-0.95, 0.95)).collect();
    let eta_t = Tensor::from_fn(&[4, 3], |_| rng.uniform());
    let eta = crate::numcore::softmax_rows(&eta_t);
    let heads = [3usize, 0, 2, 1];
    let ro = model.readout(&img, &u, eta.data(), &heads);
    let g = 5;
    for k in 0..4 {
        let mut mstar = [0.0f64; 3];
        for l in 0..3 {
            let fx = (u[2 * k] + 1.0) / 2.0 * 4.0;
            let fy = (u[2 * k + 1] + 1.0) / 2.0 * 4.0;
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            for ch in 0..3 {
                let plane = &img.m.slab(l)[ch * g * g..];
                let at = |r: usize, c: usize| plane[r * g + c];
                let s = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x0 + 1))
                    + ty * ((1.0 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1))
                    + img.q.slab(l)[ch];
                mstar[ch] += eta.at(&[k, l]) * s;
            }
        }
        let h = heads[k];
        let mut y = model.head_b.value.data()[h];
        for ch in 0..3 {
            assert!((ro.mstar[k * 3 + ch] - mstar[ch]).abs() < 1e-12);
            y += model.head_w.value.at(&[h, ch]) * mstar[ch];
        }
        assert!((ro.pred[k] - y).abs() < 1e-12);
    }
}

#[test]
fn one_hot_and_uniform_layer_weights() {
    let mut rng = SeededRng::new(9);
    let cfg = small_config(3, 2, 2, 4);
    let mut model = EncoderModel::<f64>::new(cfg.clone(), 2, 1).unwrap();
    scramble(&mut model, &mut rng, 0.3);
    let img = model.image_forward(&random_raw(&cfg, &mut rng)).unwrap();
    let u = [0.1, -0.3, 0.5, 0.5];
    let ro = model.readout(&img, &u, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0], &[0, 1]);
    for k in 0..2 {
        assert_eq!(
            &ro.mstar[k * 2..k * 2 + 2],
            &ro.samples[(k * 3 + 2) * 2..(k * 3 + 2) * 2 + 2]
        );
    }

    // identical layers + uniform weights → the common per-layer vector
    let one = &random_raw(&small_config(1, 2, 2, 4), &mut rng);
    let raw: Vec<f32> = one.iter().cycle().take(one.len() * 3).copied().collect();
    let img = model.image_forward(&raw).unwrap();
    let third = 1.0 / 3.0;
    let ro = model.readout(&img, &u, &[third; 6], &[0, 1]);
    for k in 0..2 {
        for ch in 0..2 {
            assert!((ro.mstar[k * 2 + ch] - ro.samples[k * 6 + ch]).abs() < 1e-12);
        }
    }
}

#[test]
fn heads_are_bilinear() {
    let mut rng = SeededRng::new(10);
    let cfg = small_config(2, 2, 3, 4);
    let mut model = EncoderModel::<f64>::new(cfg.clone(), 3, 1).unwrap();
    scramble(&mut model, &mut rng, 0.3);
    let img = model.image_forward(&random_raw(&cfg, &mut rng)).unwrap();
    let u = [0.2, 0.1, -0.4, 0.6, 0.0, 0.0];
    let eta = [0.5; 6];
    model.head_w.value.fill(0.0);
    let ro = model.readout(&img, &u, &eta, &[0, 1, 2]);
    assert_eq!(ro.pred, model.head_b.value.data().to_vec());

    scramble(&mut model, &mut rng, 0.3);
    model.head_b.value.fill(0.0);
    let base = model.readout(&img, &u, &eta, &[0, 1, 2]).pred;
    model.head_w.value.scale(2.0);
    let mut doubled = img.clone();
    doubled.m.scale(2.0);
    doubled.q.scale(2.0);
    let quad = model.readout(&doubled, &u, &eta, &[0, 1, 2]).pred;
    for (a, b) in base.iter().zip(&quad) {
        assert!((4.0 * a - b).abs() < 1e-12);
    }
}

#[test]
fn subset_forward_is_concatenation_of_halves() {
    let mut rng = SeededRng::new(11);
    let cfg = small_config(2, 2, 2, 4);
    let mut model = EncoderModel::<f32>::new(cfg.clone(), 6, 1).unwrap();
    scramble(&mut model, &mut rng, 0.3);
    let raw = random_raw(&cfg, &mut rng);
    let coords = random_coords(6, &mut rng);
    let all: Vec<usize> = (0..6).collect();
    let full = model.forward(&raw, &coords, &all, false, &mut rng).unwrap();
    let mut halves = model
        .forward(&raw, &coords, &all[..3], false, &mut rng)
        .unwrap();
    halves.extend(
        model
            .forward(&raw, &coords, &all[3..], false, &mut rng)
            .unwrap(),
    );
    assert_eq!(full, halves);
    assert!(model.forward(&raw, &coords, &[6], false, &mut rng).is_err());
}

#[test]
fn frozen_mapper_and_selector_get_no_gradient() {
    let mut rng = SeededRng::new(12);
    let cfg = small_config(2, 2, 2, 4);
    let mut model = EncoderModel::<f32>::new(cfg.clone(), 3, 1).unwrap();
    scramble(&mut model, &mut rng, 0.3);
    model.freeze_mapper(true);
    model.freeze_selector(true);
    let raws = vec![random_raw(&cfg, &mut rng)];
    let coords = random_coords(3, &mut rng);
    let c = vec![vec![1.0, -1.0, 0.5]];
    let eps = vec![vec![0.0; 6]];
    probe_grad(&mut model, &raws, &coords, &c, &eps);
    assert!(model
        .mapper
        .params()
        .all(|p| p.grad.data().iter().all(|g| *g == 0.0)));
    assert!(model
        .selector
        .params()
        .all(|p| p.grad.data().iter().all(|g| *g == 0.0)));
    assert!(model.head_w.grad.data().iter().any(|g| *g != 0.0));
}

fn end_to_end_check(seed: u64, global_pool: bool) {
    let mut rng = SeededRng::new(100 + seed);
    let mut cfg = small_config(2, 4, 2, 4);
    cfg.global_pool = global_pool;
    cfg.sigma = 0.05;
    let mut model = EncoderModel::<f32>::new(cfg.clone(), 4, seed).unwrap();
    scramble(&mut model, &mut rng, 0.3);
    let raws: Vec<Vec<f32>> = (0..2).map(|_| random_raw(&cfg, &mut rng)).collect();
    // Bilinear sampling is piecewise linear in u: redraw positions and jitter
    // until no sample sits within finite-difference reach of a grid line.
    let (coords, eps) = loop {
        let coords = random_coords(4, &mut rng);
        let eps: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..8).map(|_| rng.normal()).collect())
            .collect();
        let u = model.cast::<f64>().topy_forward(&coords).unwrap().u;
        let clear = eps
            .iter()
            .flatten()
            .zip(u.data().iter().cycle())
            .all(|(e, u)| {
                let pos = (u + cfg.sigma as f64 * e + 1.0) / 2.0 * (cfg.grid - 1) as f64;
                (pos - pos.round()).abs() > 0.02
            });
        if clear {
            break (coords, eps);
        }
    };
    let c: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..4).map(|_| rng.normal()).collect())
        .collect();
    let (r1, c1, e1) = (raws.clone(), c.clone(), eps.clone());
    let coords1 = coords.clone();
    let mut obj = ModelObjective::new(
        model,
        move |m: &EncoderModel<f64>| probe_loss(m, &r1, &coords1, &c1, &e1),
        move |m: &mut EncoderModel<f32>| probe_grad(m, &raws, &coords, &c, &eps),
    );
    let report = grad_check(
        &mut obj,
        &GradCheckConfig {
            seed,
            coords_per_param: 12,
            ..GradCheckConfig::default()
        },
    );
    assert!(report.passed(), "seed {seed}: {report}");
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for seed in 0..5 {
        end_to_end_check(seed, true);
    }
    end_to_end_check(9, false);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = SeededRng::new(13);
    let cfg = small_config(2, 3, 2, 4);
    let mut model = EncoderModel::<f32>::new(cfg.clone(), 5, 3).unwrap();
    scramble(&mut model, &mut rng, 0.2);
    for p in model.params_mut() {
        p.opt_m.fill(0.25);
        p.step_count = 7;
    }
    model.freeze_selector(true);
    let (a, b) = (dir.path().join("a.vxc1"), dir.path().join("b.vxc1"));
    model.save(&a, true).unwrap();
    let back = EncoderModel::<f32>::load(&a).unwrap();
    back.save(&b, true).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(back.selector.is_frozen() && !back.mapper.is_frozen());
    assert_eq!(back.head_w.step_count, 7);

    let ids: Vec<String> = (0..10).map(|i| format!("i{i}")).collect();
    let data: Vec<f32> = (0..10).flat_map(|_| random_raw(&cfg, &mut rng)).collect();
    let store = FeatureStore::new(ids, 2, 3, 4, data).unwrap();
    let coords = random_coords(5, &mut rng);
    let imgs: Vec<usize> = (0..10).collect();
    let vox: Vec<usize> = (0..5).collect();
    let p1 = model.predict(&store, &imgs, &coords, &vox).unwrap();
    let p2 = back.predict(&store, &imgs, &coords, &vox).unwrap();
    assert!(p1.iter().zip(&p2).all(|(x, y)| x.to_bits() == y.to_bits()));

    let mut ck = model.to_checkpoint(false);
    ck.arrays
        .iter_mut()
        .find(|a| a.name == "pooled.mlp.1.W")
        .unwrap()
        .name = "pooled.mlp.1.X".into();
    let err = EncoderModel::<f32>::from_checkpoint(&ck)
        .unwrap_err()
        .to_string();
    assert!(err.contains("pooled.mlp.1.W"), "{err}");
}

#[test]
fn checkpoint_names_cover_every_parameter() {
    let model = EncoderModel::<f32>::new(small_config(2, 2, 2, 4), 3, 0).unwrap();
    let names: Vec<String> = model
        .to_checkpoint(false)
        .arrays
        .iter()
        .map(|a| a.name.clone())
        .collect();
    for want in [
        "adapter.block0.conv.K",
        "adapter.block2.ln.beta",
        "adapter.final.K",
        "adapter.final.b",
        "mapper.mlp.2.W",
        "selector.mlp.0.b",
        "pooled.mlp.1.W",
        "head.W",
        "head.b",
    ] {
        assert!(names.iter().any(|n| n == want), "missing {want}");
    }
    assert_eq!(names.len(), 3 * 4 + 2 + 6 + 6 + 4 + 2);
    let pc = model.param_count();
    assert_eq!(pc.heads, 3 * (2 + 1));
}

#[test]
fn select_heads_keeps_rows() {
    let mut rng = SeededRng::new(14);
    let mut model = EncoderModel::<f32>::new(small_config(2, 2, 2, 4), 4, 0).unwrap();
    scramble(&mut model, &mut rng, 0.2);
    let sub = model.select_heads(&[2, 0]).unwrap();
    assert_eq!(sub.head_w.value.slab(0), model.head_w.value.slab(2));
    assert_eq!(sub.head_b.value.data()[1], model.head_b.value.data()[0]);
    assert!(model.select_heads(&[4]).is_err());
}
