//! Dense tensor kernels with hand-derived backward passes, the optimizer, and
//! the finite-difference checker everything else is verified with.

pub mod adabelief;
pub mod conv;
pub mod gradcheck;
pub mod loss;
pub mod ops;
pub mod param;
pub mod rng;
pub mod sample;
pub mod tensor;

pub use adabelief::{adabelief_step, AdaBeliefConfig};
pub use conv::{conv2d_same, conv2d_same_backward, ConvCache, KERNEL};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, GradCheckable, ParamObjective};
pub use loss::{neg_entropy, smooth_l1, smooth_l1_elem};
pub use ops::{
    affine, affine_backward, layernorm, layernorm_backward, softmax_rows, softmax_rows_backward,
    tanh_act, tanh_backward, ChannelAxis, LayerNormCache,
};
pub use param::Param;
pub use rng::{derive_seed, SeededRng};
pub use sample::{
    bilinear_sample, bilinear_sample_backward, global_pools, global_pools_backward, PoolCache,
};
pub use tensor::Tensor;
