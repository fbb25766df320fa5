//! All-for-One recipe: per-ROI stage-1 models, per-ROI stage-2 models
//! distilled from stage-1 helpers, and one stage-3 model over every voxel,
//! plus the NaiveMix, NoDK, randROI and extra-stage-2 variants.

mod plan;
mod stage;

#[cfg(test)]
mod tests;

pub use plan::{make_rand_roi, RecipePlan, Variant};
pub use stage::{
    naive_mix, run_recipe, run_stage1, run_stage2, run_stage3, train_job, JobOutcome,
    RecipeOutcome, StageArtifacts,
};
