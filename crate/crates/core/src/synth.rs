//! Synthetic brain with planted ground truth.
//!
//! Feature grids are band-limited random fields; each voxel reads a planted
//! retinotopic position `u*` from a planted mix of layers `η*` through planted
//! linear weights `w*`, then gets Gaussian noise at a per-group SNR.
//!
//! The 3D coordinate of a voxel is a fixed smooth embedding:
//!
//! ```text
//! p = (u*x + 0.1·sin(π·u*y),  u*y + 0.1·sin(π·u*x),  Σ_l l·η*_l + jitter)
//! ```
//!
//! normalized per subject to [−1,1]³. The in-plane part is a perturbation of
//! the identity with Lipschitz constant 0.1π < 1, hence injective.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::io::{read_json, write_json};
use crate::data::{
    split_dataset, Dataset, FeatureStore, Modality, ResponseSet, Voxel, VoxelTable, DEFAULT_RATIO,
};
use crate::error::{Error, Result};
use crate::numcore::{derive_seed, sample::sample_point, SeededRng};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

const TAG_FIELD: u64 = 1;
const TAG_VOXEL: u64 = 2;
const TAG_FAMILY: u64 = 3;
const TAG_NOISE: u64 = 4;
const TAG_SPLIT: u64 = 5;

/// Signal-to-noise ratio; `inf` (noise off) serializes as the string `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Snr(pub f32);

impl Snr {
    pub const INF: Snr = Snr(f32::INFINITY);
}

impl Serialize for Snr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f32(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Snr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Snr(v)),
            Raw::Text(t) if t == "inf" => Ok(Snr::INF),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad snr `{t}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldMode {
    /// Sum of K random low-frequency cosines per channel.
    #[default]
    Smooth,
    /// Spatially constant per channel; position carries no information.
    Uniform,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preference {
    /// One layer, chosen uniformly at random.
    #[default]
    OneHot,
    /// Two adjacent layers with weight `t ∈ [0.25, 0.75]` on the deeper one.
    Mixture,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerWeights {
    /// One weight vector read from every layer.
    #[default]
    Shared,
    /// An independent weight vector per layer.
    PerLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelGroup {
    pub count: usize,
    pub snr: Snr,
    #[serde(default)]
    pub preference: Preference,
    #[serde(default)]
    pub weights: LayerWeights,
    /// Draw weights around a shared prototype (for parcellation recovery).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<String>,
    #[serde(default = "default_subject")]
    pub subject: String,
}

fn default_subject() -> String {
    "s0".into()
}

impl VoxelGroup {
    pub fn new(count: usize, snr: f32) -> Self {
        Self {
            count,
            snr: Snr(snr),
            preference: Preference::OneHot,
            weights: LayerWeights::Shared,
            family: None,
            roi: None,
            subject: default_subject(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_images: usize,
    pub layers: usize,
    pub channels: usize,
    pub grid: usize,
    pub groups: Vec<VoxelGroup>,
    #[serde(default)]
    pub field: FieldMode,
    #[serde(default = "default_cosines")]
    pub n_cosines: usize,
    /// Radius of the frequency disk, radians per unit of normalized grid.
    #[serde(default = "default_max_freq")]
    pub max_freq: f64,
    #[serde(default = "default_reps")]
    pub n_reps: u32,
    /// Spread of family members around their prototype.
    #[serde(default = "default_family_spread")]
    pub family_spread: f64,
    #[serde(default = "default_depth_jitter")]
    pub depth_jitter: f64,
    #[serde(default = "default_ratio")]
    pub split_ratio: [u32; 3],
    #[serde(default)]
    pub seed: u64,
}

fn default_cosines() -> usize {
    8
}
fn default_max_freq() -> f64 {
    2.5
}
fn default_reps() -> u32 {
    1
}
fn default_family_spread() -> f64 {
    0.3
}
fn default_depth_jitter() -> f64 {
    0.1
}
fn default_ratio() -> [u32; 3] {
    DEFAULT_RATIO
}

impl SynthSpec {
    /// Single-group spec with otherwise default settings.
    pub fn simple(
        n_images: usize,
        layers: usize,
        channels: usize,
        grid: usize,
        n_voxels: usize,
        snr: f32,
    ) -> Self {
        Self {
            n_images,
            layers,
            channels,
            grid,
            groups: vec![VoxelGroup::new(n_voxels, snr)],
            field: FieldMode::Smooth,
            n_cosines: default_cosines(),
            max_freq: default_max_freq(),
            n_reps: default_reps(),
            family_spread: default_family_spread(),
            depth_jitter: default_depth_jitter(),
            split_ratio: DEFAULT_RATIO,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 || self.layers < 1 || self.channels < 1 {
            return Err(Error::Invalid(
                "synth spec needs G >= 2, L >= 1, D_in >= 1".into(),
            ));
        }
        if self.n_reps < 1 {
            return Err(Error::Invalid("n_reps must be >= 1".into()));
        }
        if let Some(g) = self
            .groups
            .iter()
            .find(|g| g.snr.0.is_nan() || g.snr.0 < 0.0)
        {
            return Err(Error::Invalid(format!("snr must be >= 0, got {}", g.snr.0)));
        }
        Ok(())
    }

    pub fn n_voxels(&self) -> usize {
        self.groups.iter().map(|g| g.count).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelTruth {
    pub id: String,
    pub u: [f32; 2],
    pub eta: Vec<f32>,
    /// One row (shared across layers) or `L` rows, each `[D_in]`.
    pub w: Vec<Vec<f32>>,
    pub snr: Snr,
    pub group: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<String>,
}

impl VoxelTruth {
    pub fn weights_for_layer(&self, l: usize) -> &[f32] {
        if self.w.len() == 1 {
            &self.w[0]
        } else {
            &self.w[l]
        }
    }

    /// Layer-averaged weight vector, `Σ_l η_l w_l`.
    pub fn effective_weights(&self) -> Vec<f32> {
        let d = self.w[0].len();
        let mut out = vec![0.0f32; d];
        for (l, e) in self.eta.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.weights_for_layer(l)) {
                *o += e * w;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub layers: usize,
    pub channels: usize,
    pub n_reps: u32,
    pub voxels: Vec<VoxelTruth>,
}

impl GroundTruth {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn roi_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for v in &self.voxels {
            if let Some(r) = &v.roi {
                if !names.contains(r) {
                    names.push(r.clone());
                }
            }
        }
        names
    }
}

/// √(s/(1+s)) with `s = n_reps·snr`: the best attainable Pearson r against a
/// repetition-averaged response.
pub fn oracle_ceiling(snr: f32, n_reps: u32) -> f32 {
    if snr.is_infinite() {
        return 1.0;
    }
    let s = n_reps as f64 * snr as f64;
    (s / (1.0 + s)).sqrt() as f32
}

fn image_id(i: usize) -> String {
    format!("img{i:05}")
}

fn voxel_id(j: usize) -> String {
    format!("vox{j:05}")
}

/// One channel's field: K cosines evaluated on the align-corners node grid.
fn fill_field(out: &mut [f32], g: usize, k: usize, max_freq: f64, rng: &mut SeededRng) {
    let amp = (2.0 / k as f64).sqrt();
    let waves: Vec<(f64, f64, f64)> = (0..k)
        .map(|_| {
            // uniform in the disk: radius ∝ sqrt(uniform)
            let r = max_freq * rng.uniform().sqrt();
            let th = 2.0 * PI * rng.uniform();
            let ph = 2.0 * PI * rng.uniform();
            (r * th.cos(), r * th.sin(), ph)
        })
        .collect();
    let step = 2.0 / (g - 1) as f64;
    for row in 0..g {
        let y = -1.0 + step * row as f64;
        for col in 0..g {
            let x = -1.0 + step * col as f64;
            let v: f64 = waves
                .iter()
                .map(|(wx, wy, ph)| (wx * x + wy * y + ph).cos())
                .sum();
            out[row * g + col] = (amp * v) as f32;
        }
    }
}

pub fn gen_feature_grids(spec: &SynthSpec) -> Result<FeatureStore> {
    spec.validate()?;
    let (l, d, g) = (spec.layers, spec.channels, spec.grid);
    let gg = g * g;
    let mut data = vec![0.0f32; spec.n_images * l * d * gg];
    for (i, img) in data.chunks_mut(l * d * gg).enumerate() {
        let mut rng = SeededRng::derive(spec.seed, &[TAG_FIELD, i as u64]);
        for chan in img.chunks_mut(gg) {
            match spec.field {
                FieldMode::Smooth => fill_field(chan, g, spec.n_cosines, spec.max_freq, &mut rng),
                FieldMode::Uniform => chan.fill(rng.normal() as f32),
            }
        }
    }
    FeatureStore::new((0..spec.n_images).map(image_id).collect(), l, d, g, data)
}

fn random_weights(d: usize, rng: &mut SeededRng) -> Vec<f32> {
    let s = 1.0 / (d as f64).sqrt();
    (0..d).map(|_| (s * rng.normal()) as f32).collect()
}

pub fn gen_brain(spec: &SynthSpec) -> Result<(VoxelTable, GroundTruth)> {
    spec.validate()?;
    let (l, d) = (spec.layers, spec.channels);
    let mut voxels = Vec::with_capacity(spec.n_voxels());
    let mut truth = Vec::with_capacity(spec.n_voxels());
    let mut j = 0;
    for (gi, group) in spec.groups.iter().enumerate() {
        let proto = group.family.map(|f| {
            let mut rng = SeededRng::derive(spec.seed, &[TAG_FAMILY, f as u64]);
            let rows = if group.weights == LayerWeights::PerLayer {
                l
            } else {
                1
            };
            (0..rows)
                .map(|_| random_weights(d, &mut rng))
                .collect::<Vec<_>>()
        });
        for _ in 0..group.count {
            let mut rng = SeededRng::derive(spec.seed, &[TAG_VOXEL, j as u64]);
            let u = [rng.uniform_in(-0.9, 0.9), rng.uniform_in(-0.9, 0.9)];
            let mut eta = vec![0.0f32; l];
            match group.preference {
                Preference::OneHot => eta[rng.below(l)] = 1.0,
                Preference::Mixture if l == 1 => eta[0] = 1.0,
                Preference::Mixture => {
                    let lo = rng.below(l - 1);
                    let t = rng.uniform_in(0.25, 0.75) as f32;
                    eta[lo] = 1.0 - t;
                    eta[lo + 1] = t;
                }
            }
            let rows = if group.weights == LayerWeights::PerLayer {
                l
            } else {
                1
            };
            let w: Vec<Vec<f32>> = match &proto {
                None => (0..rows).map(|_| random_weights(d, &mut rng)).collect(),
                Some(p) => p
                    .iter()
                    .map(|row| {
                        let s = spec.family_spread / (d as f64).sqrt();
                        row.iter().map(|&c| c + (s * rng.normal()) as f32).collect()
                    })
                    .collect(),
            };
            let depth: f64 = eta
                .iter()
                .enumerate()
                .map(|(k, e)| k as f64 * *e as f64)
                .sum::<f64>()
                + spec.depth_jitter * rng.uniform_in(-1.0, 1.0);
            let p = [
                u[0] + 0.1 * (PI * u[1]).sin(),
                u[1] + 0.1 * (PI * u[0]).sin(),
                depth,
            ];
            voxels.push(Voxel {
                id: voxel_id(j),
                subject: group.subject.clone(),
                modality: Modality::Synthetic,
                p: [p[0] as f32, p[1] as f32, p[2] as f32],
                roi: group.roi.clone(),
            });
            truth.push(VoxelTruth {
                id: voxel_id(j),
                u: [u[0] as f32, u[1] as f32],
                eta,
                w,
                snr: group.snr,
                group: gi,
                family: group.family,
                roi: group.roi.clone(),
            });
            j += 1;
        }
    }
    let mut table = VoxelTable::new(voxels)?;
    table.normalize_coordinates();
    Ok((
        table,
        GroundTruth {
            layers: l,
            channels: d,
            n_reps: spec.n_reps,
            voxels: truth,
        },
    ))
}

/// Noise-free responses `[image × voxel]`, `w*·Σ_l η*_l·sample(M^l, u*)`.
pub fn clean_signal(store: &FeatureStore, gt: &GroundTruth) -> Result<Vec<f64>> {
    if store.layers != gt.layers || store.channels != gt.channels {
        return Err(Error::Invalid(
            "ground truth does not match feature store shape".into(),
        ));
    }
    let (n, nv, d, g) = (
        store.n_images(),
        gt.voxels.len(),
        store.channels,
        store.grid,
    );
    let mut out = vec![0.0f64; n * nv];
    let mut buf = vec![0.0f32; d];
    for i in 0..n {
        for (j, v) in gt.voxels.iter().enumerate() {
            let mut y = 0.0f64;
            for (l, &e) in v.eta.iter().enumerate() {
                if e == 0.0 {
                    continue;
                }
                sample_point(store.layer(i, l), d, g, v.u[0], v.u[1], &mut buf);
                let dot: f64 = buf
                    .iter()
                    .zip(v.weights_for_layer(l))
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum();
                y += e as f64 * dot;
            }
            out[i * nv + j] = y;
        }
    }
    Ok(out)
}

/// Adds per-repetition Gaussian noise with variance `var(y_j)/snr_j` and
/// averages the repetitions. A voxel with no signal variance uses unit
/// reference variance; `snr = 0` drops the signal entirely.
pub fn gen_responses(
    store: &FeatureStore,
    gt: &GroundTruth,
    spec: &SynthSpec,
) -> Result<ResponseSet> {
    let clean = clean_signal(store, gt)?;
    let (n, nv) = (store.n_images(), gt.voxels.len());
    let reps = spec.n_reps.max(1);
    let mut values = vec![0.0f32; n * nv];
    for (j, v) in gt.voxels.iter().enumerate() {
        let col: Vec<f64> = (0..n).map(|i| clean[i * nv + j]).collect();
        let mean = col.iter().sum::<f64>() / n.max(1) as f64;
        let var = col.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
        let var_ref = if var > 1e-12 { var } else { 1.0 };
        let snr = v.snr.0 as f64;
        let (signal_scale, noise_sd) = if snr.is_infinite() {
            (1.0, 0.0)
        } else if snr == 0.0 {
            (0.0, var_ref.sqrt())
        } else {
            (1.0, (var_ref / snr).sqrt())
        };
        let mut rng = SeededRng::derive(spec.seed, &[TAG_NOISE, j as u64]);
        for (i, y) in col.iter().enumerate() {
            let mut acc = 0.0;
            if noise_sd > 0.0 {
                for _ in 0..reps {
                    acc += rng.normal();
                }
            }
            values[i * nv + j] = (signal_scale * y + noise_sd * acc / reps as f64) as f32;
        }
    }
    ResponseSet::new(
        store.image_ids.clone(),
        gt.voxels.iter().map(|v| v.id.clone()).collect(),
        vec![reps; n],
        values,
    )
}

/// Full bundle: features, voxels, responses, split and ground truth.
pub fn generate(spec: &SynthSpec) -> Result<(Dataset, GroundTruth)> {
    let store = gen_feature_grids(spec)?;
    let (table, gt) = gen_brain(spec)?;
    let responses = gen_responses(&store, &gt, spec)?;
    let split = split_dataset(
        &store.image_ids,
        spec.split_ratio,
        derive_seed(spec.seed, &[TAG_SPLIT]),
    )?;
    let ds = Dataset::new(store, table, responses, Some(split))?;
    Ok((ds, gt))
}

/// Writes the dataset files plus `ground_truth.json`.
pub fn write_bundle(ds: &Dataset, gt: &GroundTruth, dir: &Path) -> Result<()> {
    ds.save(dir)?;
    gt.save(&dir.join(GROUND_TRUTH_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn ceiling_examples() {
        assert!((oracle_ceiling(1.0, 1) - 0.70710677).abs() < 1e-6);
        assert!((oracle_ceiling(1.0, 3) - 0.8660254).abs() < 1e-6);
        assert_eq!(oracle_ceiling(f32::INFINITY, 1), 1.0);
        assert_eq!(oracle_ceiling(0.0, 5), 0.0);
    }

    #[test]
    fn fields_are_deterministic_smooth_and_centered() {
        let spec = SynthSpec::simple(200, 2, 4, 8, 1, 1.0);
        let a = gen_feature_grids(&spec).unwrap();
        assert_eq!(a, gen_feature_grids(&spec).unwrap());

        let g = spec.grid;
        let (mut num, mut den) = (0.0, 0.0);
        let mut sums = vec![0.0f64; 4];
        let mut sq = vec![0.0f64; 4];
        for i in 0..a.n_images() {
            for l in 0..2 {
                for (c, ch) in a.layer(i, l).chunks(g * g).enumerate() {
                    for r in 0..g {
                        for k in 0..g - 1 {
                            num += ch[r * g + k] as f64 * ch[r * g + k + 1] as f64;
                        }
                    }
                    den += ch.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() * (g - 1) as f64
                        / g as f64;
                    let m = ch.iter().map(|v| *v as f64).sum::<f64>() / (g * g) as f64;
                    sums[c] += m;
                    sq[c] += m * m;
                }
            }
        }
        assert!(num / den > 0.5, "lag-1 autocorrelation {}", num / den);
        let k = (a.n_images() * 2) as f64;
        for c in 0..4 {
            let mean = sums[c] / k;
            let se = ((sq[c] / k - mean * mean) / k).sqrt();
            assert!(mean.abs() < 3.0 * se, "channel {c}: mean {mean} se {se}");
        }
    }

    #[test]
    fn brain_embedding_properties() {
        let mut spec = SynthSpec::simple(4, 3, 4, 8, 400, 1.0);
        spec.depth_jitter = 0.0;
        let (table, gt) = gen_brain(&spec).unwrap();
        for v in &gt.voxels {
            assert!(v.u.iter().all(|c| (-0.9..=0.9).contains(c)));
            assert!((v.eta.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let us: Vec<[f32; 2]> = gt.voxels.iter().map(|v| v.u).collect();
        let spread = |k: usize| {
            let (lo, hi) = us
                .iter()
                .fold((1.0f32, -1.0f32), |(a, b), u| (a.min(u[k]), b.max(u[k])));
            (lo, hi)
        };
        let (lo, hi) = spread(0);
        assert!(lo < -0.8 && hi > 0.8);
        for a in 0..table.len() {
            for b in a + 1..table.len() {
                let du = ((us[a][0] - us[b][0]).powi(2) + (us[a][1] - us[b][1]).powi(2)).sqrt();
                if du > 0.1 {
                    assert_ne!(table.voxels[a].p, table.voxels[b].p);
                }
            }
            assert!(table.voxels[a].p.iter().all(|c| (-1.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn equal_truth_gives_nearby_coordinates() {
        // the embedding is a smooth function of (u*, η*): same inputs, same point
        let (u, depth) = ([0.3f64, -0.2], 1.0f64);
        let emb = |u: [f64; 2], z: f64| {
            [
                u[0] + 0.1 * (PI * u[1]).sin(),
                u[1] + 0.1 * (PI * u[0]).sin(),
                z,
            ]
        };
        let a = emb(u, depth);
        let b = emb([u[0] + 1e-4, u[1]], depth);
        let dist: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dist < 2e-4);
    }

    #[test]
    fn noiseless_responses_equal_composition() {
        let mut spec = SynthSpec::simple(6, 2, 3, 5, 7, f32::INFINITY);
        spec.groups[0].preference = Preference::Mixture;
        let store = gen_feature_grids(&spec).unwrap();
        let (_, gt) = gen_brain(&spec).unwrap();
        let resp = gen_responses(&store, &gt, &spec).unwrap();
        let clean = clean_signal(&store, &gt).unwrap();
        for (r, c) in resp.values().iter().zip(&clean) {
            assert_eq!(*r, *c as f32);
        }
        // independent bilinear oracle on node-free coordinates
        let g = 5;
        for (j, v) in gt.voxels.iter().enumerate() {
            let fx = (v.u[0] as f64 + 1.0) / 2.0 * (g - 1) as f64;
            let fy = (v.u[1] as f64 + 1.0) / 2.0 * (g - 1) as f64;
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            for i in 0..6 {
                let mut y = 0.0;
                for l in 0..2 {
                    for c in 0..3 {
                        let ch = &store.layer(i, l)[c * g * g..];
                        let at = |r: usize, k: usize| ch[r * g + k] as f64;
                        let s = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x0 + 1))
                            + ty * ((1.0 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
                        y += v.eta[l] as f64 * v.weights_for_layer(l)[c] as f64 * s;
                    }
                }
                assert!((y - clean[i * 7 + j]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_weights_give_unit_reference_noise() {
        let spec = SynthSpec::simple(3000, 1, 2, 4, 2, 1.0);
        let store = gen_feature_grids(&spec).unwrap();
        let (_, mut gt) = gen_brain(&spec).unwrap();
        for v in &mut gt.voxels {
            v.w = vec![vec![0.0; 2]];
        }
        let resp = gen_responses(&store, &gt, &spec).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = resp.column(j).iter().map(|v| *v as f64).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64;
            assert!((var - 1.0).abs() < 0.1, "var {var}");
        }
    }

    #[test]
    fn empirical_snr_and_cheating_predictor() {
        let mut spec = SynthSpec::simple(5000, 2, 4, 6, 10, 2.0);
        spec.n_reps = 2;
        let store = gen_feature_grids(&spec).unwrap();
        let (_, gt) = gen_brain(&spec).unwrap();
        let resp = gen_responses(&store, &gt, &spec).unwrap();
        let clean = clean_signal(&store, &gt).unwrap();
        let ceil = oracle_ceiling(2.0, 2) as f64;
        for j in 0..10 {
            let c: Vec<f64> = (0..5000).map(|i| clean[i * 10 + j]).collect();
            let y: Vec<f64> = resp.column(j).iter().map(|v| *v as f64).collect();
            let noise: Vec<f64> = y.iter().zip(&c).map(|(a, b)| a - b).collect();
            let var = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
            };
            // per-repetition snr: averaging 2 reps halves the noise variance
            let snr = var(&c) / (2.0 * var(&noise));
            assert!((snr - 2.0).abs() < 0.2, "voxel {j}: snr {snr}");
            assert!((pearson(&c, &y) - ceil).abs() < 0.05);
        }
    }

    #[test]
    fn spec_json_round_trip_with_inf() {
        let mut spec = SynthSpec::simple(10, 2, 2, 4, 3, f32::INFINITY);
        spec.groups.push(VoxelGroup {
            family: Some(1),
            roi: Some("A".into()),
            ..VoxelGroup::new(2, 0.5)
        });
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"inf\""));
        let back: SynthSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        assert!(serde_json::from_str::<SynthSpec>(
            r#"{"n_images":1,"layers":1,"channels":1,"grid":2,"groups":[],"bogus":1}"#
        )
        .is_err());
    }

    #[test]
    fn families_cluster_weights() {
        let mut spec = SynthSpec::simple(2, 1, 16, 4, 0, 1.0);
        spec.groups = (0..3)
            .map(|f| VoxelGroup {
                family: Some(f),
                ..VoxelGroup::new(20, 1.0)
            })
            .collect();
        let (_, gt) = gen_brain(&spec).unwrap();
        let dist = |a: &VoxelTruth, b: &VoxelTruth| -> f32 {
            a.w[0]
                .iter()
                .zip(&b.w[0])
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f32>()
        };
        let within = dist(&gt.voxels[0], &gt.voxels[1]);
        let across = dist(&gt.voxels[0], &gt.voxels[25]);
        assert!(within < across);
    }

    #[test]
    fn generate_bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::simple(20, 2, 3, 4, 5, 1.0);
        let (ds, gt) = generate(&spec).unwrap();
        write_bundle(&ds, &gt, dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.responses, ds.responses);
        assert_eq!(
            GroundTruth::load(&dir.path().join(GROUND_TRUTH_FILE)).unwrap(),
            gt
        );
    }
}
