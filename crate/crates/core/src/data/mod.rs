//! On-disk formats, splitting and repetition averaging.

pub mod bundle;
pub mod checkpoint;
pub mod features;
pub mod io;
pub mod responses;
pub mod split;
pub mod voxels;

pub use bundle::Dataset;
pub use checkpoint::{CheckpointFile, NamedArray};
pub use features::{read_feature_store, write_feature_store, FeatureStore};
pub use io::{file_checksum, fnv1a64, read_json, write_json};
pub use responses::{
    read_matrix, read_responses, repetition_average, write_matrix, write_responses, MatrixSidecar,
    ResponseSet, MATRIX_FORMAT,
};
pub use split::{read_split, split_dataset, write_split, SplitSpec, DEFAULT_RATIO};
pub use voxels::{read_voxel_table, write_voxel_table, Modality, Voxel, VoxelTable};
