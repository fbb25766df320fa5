//! Single-model training: composite loss, subsampled minibatches, early
//! stopping on a conditioning voxel set, and greedy checkpoint soup.

pub mod config;
pub mod fit;
pub mod loss;
pub mod soup;


pub use config::{TrainConfig, FULL_SCALE_VOXEL_CAP};
pub use fit::{
    fit, fit_with_validator, roi_groups, validate, write_log, FitOutcome, LogRecord, StageRole,
    Validation,
};
pub use loss::{compute_loss, LossGrads, LossTerms};
pub use soup::{greedy_soup, CheckpointPool, SoupOutcome};
