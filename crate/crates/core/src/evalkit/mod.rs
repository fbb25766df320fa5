//! Scoring, frozen-feature linear probing and report emission.

pub mod metrics;
pub mod pca;
pub mod probe;
pub mod report;

pub use metrics::{
    mean, median, noise_normalized, pearson, pearson_per_voxel, Correlations, NormConvention,
    MIN_CEILING,
};
pub use pca::{pca_fit, Pca};
pub use probe::{
    adapter_features, linear_probe, raw_features, FeatureMatrix, ProbeResult, DEFAULT_RIDGE_SCALE,
    MIN_RIDGE,
};
pub use report::{
    emit_reports, layer_selector_csv, retina_svg, score_model, svg_position, EmittedReports,
    ReportMeta, RoiSummary, ScoreReport, VoxelScore, DOT_RADIUS, PALETTE, SELECTOR_BINS, SVG_SIZE,
};
