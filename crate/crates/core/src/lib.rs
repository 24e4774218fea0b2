//! Weakly-supervised segmentation from image-level labels and rough area
//! estimates.
//!
//! A small VGG-style fully convolutional network produces one probability
//! map per stage (side outputs) plus a fixed-weight fusion of them. Every map
//! is pooled into an image-level probability with a generalized mean and
//! trained against the image label (multiple instance learning), while the
//! mean pixel probability of positive images is pulled toward the annotated
//! area fraction.
//!
//! Numeric code is generic over [`Scalar`]; [`Network32`]/[`Tensor32`] are the
//! training defaults and the `64` aliases back the gradient checks.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod mask;
pub mod objective;
pub mod pooling;
pub mod scalar;
pub mod superpixel;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, RegionGroups, Tape, Var};
pub use backbone::{
    build_network, receptive_field_report, BackboneConfig, Network, RfRow, SideOutputs, StageSpec,
};
pub use error::{Error, Result};
pub use eval::{evaluate, f_measure, render_heatmap, EvalReport, MapSelect};
pub use mask::Mask;
pub use objective::{predict_mask, total_loss, Bag, LossBreakdown, LossWeights, Objective};
pub use pooling::{gm_pool, gm_pool_grad, hard_max_pool, positiveness, InstanceVector};
pub use scalar::Scalar;
pub use superpixel::{slic, SlicParams, SuperpixelMap};
pub use synth::{generate, SynthBag, SynthSpec};
pub use tensor::Tensor;
pub use train::{train, TrainConfig, TrainLog};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Network32 = Network<f32>;
pub type Network64 = Network<f64>;
pub type Bag32 = Bag<f32>;
pub type Bag64 = Bag<f64>;
