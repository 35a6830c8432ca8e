//! Minimal dense tensors with reverse-mode differentiation.

mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, NodeId, BN_EPS, ELU_ALPHA};
pub use layers::{apply_bn_updates, BnUpdate, Bottleneck, ConvBn, Forward, Linear, Lstm, Stage, BN_MOMENTUM};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
