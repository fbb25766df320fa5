//! Score tables and the retina-map / layer-selector diagrams.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{
    mean, median, noise_normalized, pearson_per_voxel, Correlations, NormConvention,
};
use crate::data::{write_json, Dataset};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};

pub const SVG_SIZE: f64 = 512.0;
pub const DOT_RADIUS: f64 = 2.0;
const SVG_PAD: f64 = 16.0;
/// Layer colours, cycled when there are more than ten layers.
pub const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];
/// Bins per coordinate axis in `layerselector.csv`.
pub const SELECTOR_BINS: usize = 4;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub model_id: String,
    pub split: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelScore {
    pub voxel_id: String,
    pub roi: Option<String>,
    pub r: f64,
    pub r_normalized: Option<f64>,
    /// Constant prediction or target.
    pub degenerate: bool,
    /// Ceiling too low to normalise by.
    pub low_ceiling: bool,
}

impl VoxelScore {
    fn flags(&self) -> String {
        let mut f = Vec::new();
        if self.degenerate {
            f.push("degenerate");
        }
        if self.low_ceiling {
            f.push("low_ceiling");
        }
        f.join("|")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiSummary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub nc_median: Option<f64>,
}

impl RoiSummary {
    fn of(scores: &[&VoxelScore]) -> Self {
        let r: Vec<f64> = scores.iter().map(|s| s.r).collect();
        let nc: Vec<f64> = scores.iter().filter_map(|s| s.r_normalized).collect();
        Self {
            n: r.len(),
            mean: mean(&r),
            median: median(&r),
            nc_median: (!nc.is_empty()).then(|| median(&nc)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub meta: ReportMeta,
    pub convention: Option<NormConvention>,
    pub overall: RoiSummary,
    pub per_roi: BTreeMap<String, RoiSummary>,
    pub voxels: Vec<VoxelScore>,
}

impl ScoreReport {
    /// Assembles a report; `rois` names each voxel's group and `ceilings`
    /// (one per voxel) enables noise-normalised scores.
    pub fn build(
        meta: ReportMeta,
        voxel_ids: &[String],
        rois: &[Option<String>],
        scores: &Correlations,
        ceilings: Option<(&[f64], NormConvention)>,
    ) -> Result<Self> {
        let n = scores.r.len();
        if voxel_ids.len() != n || rois.len() != n {
            return Err(Error::shape(
                "score report",
                n,
                format!("{} ids / {} rois", voxel_ids.len(), rois.len()),
            ));
        }
        let normalized = match ceilings {
            Some((c, conv)) => Some(noise_normalized(&scores.r, c, conv)?),
            None => None,
        };
        let voxels: Vec<VoxelScore> = (0..n)
            .map(|v| VoxelScore {
                voxel_id: voxel_ids[v].clone(),
                roi: rois[v].clone(),
                r: scores.r[v],
                r_normalized: normalized.as_ref().and_then(|z| z[v]),
                degenerate: scores.degenerate[v],
                low_ceiling: normalized.as_ref().is_some_and(|z| z[v].is_none()),
            })
            .collect();
        let mut groups: BTreeMap<String, Vec<&VoxelScore>> = BTreeMap::new();
        for s in &voxels {
            if let Some(roi) = &s.roi {
                groups.entry(roi.clone()).or_default().push(s);
            }
        }
        let per_roi = groups
            .into_iter()
            .map(|(k, g)| (k, RoiSummary::of(&g)))
            .collect();
        let overall = RoiSummary::of(&voxels.iter().collect::<Vec<_>>());
        Ok(Self {
            meta,
            convention: ceilings.map(|c| c.1),
            overall,
            per_roi,
            voxels,
        })
    }

    /// Per-voxel table: `voxel_id,roi,r,r_normalized,flags`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("voxel_id,roi,r,r_normalized,flags\n");
        for s in &self.voxels {
            let nc = s
                .r_normalized
                .map(|z| format!("{z:.6}"))
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{:.6},{},{}",
                s.voxel_id,
                s.roi.as_deref().unwrap_or(""),
                s.r,
                nc,
                s.flags()
            );
        }
        out
    }

    /// Writes `scores.csv` and `scores.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("scores.csv"), self.to_csv())?;
        write_json(&dir.join("scores.json"), self)
    }
}

/// Test-split Pearson r of a model over all of its voxels.
pub fn score_model(
    model: &EncoderModel<f32>,
    ds: &Dataset,
    voxels: &[usize],
    images: &[usize],
) -> Result<Correlations> {
    let heads: Vec<usize> = (0..voxels.len()).collect();
    let coords: Vec<[f32; 3]> = voxels.iter().map(|&v| ds.voxels.voxels[v].p).collect();
    let pred = model.predict(&ds.features, images, &coords, &heads)?;
    let y: Vec<f32> = images
        .iter()
        .flat_map(|&i| voxels.iter().map(move |&v| ds.responses.get(i, v)))
        .collect();
    pearson_per_voxel(&pred, &y, images.len(), voxels.len())
}

/// What [`emit_reports`] wrote and the map it drew.
#[derive(Clone, Debug)]
pub struct EmittedReports {
    pub report: ScoreReport,
    /// Retina coordinates per voxel (σ = 0).
    pub u: Vec<[f64; 2]>,
    /// Preferred layer per voxel.
    pub argmax_layer: Vec<usize>,
    pub files: Vec<PathBuf>,
}

/// Writes test-split scores, `retinamap.svg` and `layerselector.csv` for a
/// model whose heads are `voxels`, in order. `ceilings` are per dataset
/// voxel.
pub fn emit_reports(
    model: &EncoderModel<f32>,
    ds: &Dataset,
    voxels: &[usize],
    out_dir: &Path,
    meta: ReportMeta,
    ceilings: Option<(&[f64], NormConvention)>,
) -> Result<EmittedReports> {
    let [_, _, test] = ds.split_indices()?;
    if let Some((c, _)) = ceilings.filter(|(c, _)| c.len() != ds.voxels.len()) {
        return Err(Error::shape(
            "emit_reports ceilings",
            ds.voxels.len(),
            c.len(),
        ));
    }
    if let Some(&bad) = voxels.iter().find(|&&v| v >= ds.voxels.len()) {
        return Err(Error::Invalid(format!("voxel {bad} out of range")));
    }
    let scores = score_model(model, ds, voxels, &test)?;
    let pick = |v: &usize| &ds.voxels.voxels[*v];
    let ids: Vec<String> = voxels.iter().map(|v| pick(v).id.clone()).collect();
    let rois: Vec<Option<String>> = voxels.iter().map(|v| pick(v).roi.clone()).collect();
    let sub_ceilings: Option<Vec<f64>> =
        ceilings.map(|(c, _)| voxels.iter().map(|&v| c[v]).collect());
    let ceilings = sub_ceilings.as_deref().zip(ceilings.map(|(_, conv)| conv));
    let report = ScoreReport::build(meta, &ids, &rois, &scores, ceilings)?;
    report.save(out_dir)?;

    let coords: Vec<[f32; 3]> = voxels.iter().map(|v| pick(v).p).collect();
    let topy = model.topy_forward(&coords)?;
    let l = model.config.layers;
    let u: Vec<[f64; 2]> = topy
        .u
        .data()
        .chunks(2)
        .map(|c| [c[0] as f64, c[1] as f64])
        .collect();
    let eta = topy.eta.data();
    let argmax_layer: Vec<usize> = eta
        .chunks(l)
        .map(|row| (0..l).fold(0, |best, k| if row[k] > row[best] { k } else { best }))
        .collect();
    fs::write(out_dir.join("retinamap.svg"), retina_svg(&u, &argmax_layer))?;
    fs::write(
        out_dir.join("layerselector.csv"),
        layer_selector_csv(&coords, eta, l),
    )?;
    Ok(EmittedReports {
        report,
        u,
        argmax_layer,
        files: [
            "scores.csv",
            "scores.json",
            "retinamap.svg",
            "layerselector.csv",
        ]
        .iter()
        .map(|f| out_dir.join(f))
        .collect(),
    })
}

/// Pixel position of a retina coordinate; `y` grows upwards.
pub fn svg_position(u: [f64; 2]) -> (f64, f64) {
    let span = SVG_SIZE - 2.0 * SVG_PAD;
    (
        SVG_PAD + (u[0] + 1.0) / 2.0 * span,
        SVG_PAD + (1.0 - u[1]) / 2.0 * span,
    )
}

/// One dot per voxel at its retina coordinate, coloured by preferred layer.
pub fn retina_svg(u: &[[f64; 2]], layer: &[usize]) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{0}\" viewBox=\"0 0 {0} {0}\">\n\
         <rect width=\"{0}\" height=\"{0}\" fill=\"white\"/>\n\
         <rect x=\"{1}\" y=\"{1}\" width=\"{2}\" height=\"{2}\" fill=\"none\" stroke=\"#cccccc\"/>\n",
        SVG_SIZE,
        SVG_PAD,
        SVG_SIZE - 2.0 * SVG_PAD
    );
    for (p, &k) in u.iter().zip(layer) {
        let (x, y) = svg_position(*p);
        let _ = writeln!(
            s,
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{DOT_RADIUS}\" fill=\"{}\"/>",
            PALETTE[k % PALETTE.len()]
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Mean layer weights over voxels binned on a regular grid of their
/// coordinates (`SELECTOR_BINS` per axis over `[-1, 1]`); empty bins are
/// omitted.
pub fn layer_selector_csv(coords: &[[f32; 3]], eta: &[f32], layers: usize) -> String {
    let b = SELECTOR_BINS;
    let bin = |x: f32| (((x as f64 + 1.0) / 2.0 * b as f64).floor().max(0.0) as usize).min(b - 1);
    let mut sums: BTreeMap<(usize, usize, usize), (usize, Vec<f64>)> = BTreeMap::new();
    for (v, p) in coords.iter().enumerate() {
        let key = (bin(p[0]), bin(p[1]), bin(p[2]));
        let e = sums.entry(key).or_insert_with(|| (0, vec![0.0; layers]));
        e.0 += 1;
        for k in 0..layers {
            e.1[k] += eta[v * layers + k] as f64;
        }
    }
    let mut out = String::from("bin_x,bin_y,bin_z,count");
    for k in 0..layers {
        let _ = write!(out, ",eta_{k}");
    }
    out.push('\n');
    for ((x, y, z), (count, s)) in sums {
        let _ = write!(out, "{x},{y},{z},{count}");
        for v in s {
            let _ = write!(out, ",{:.6}", v / count as f64);
        }
        out.push('\n');
    }
    out
}
