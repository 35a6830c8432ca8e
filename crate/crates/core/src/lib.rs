#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod pose;
pub mod train;

pub use error::{Error, Result};
pub use loss::{LossWeights, PairSpec, RawPose, WindowPrediction, WindowTarget};
pub use pose::{Pose, PoseMatrix};
