//! Minimal neural-network toolkit on top of `candle-core`: parameter store,
//! layers, differentiable helpers and the Adam optimizer.

pub mod kernels;
mod layers;
pub mod ops;
mod optim;
mod params;

pub use layers::{Conv2d, DepthwiseConv, LayerNorm, Linear, Mlp};
pub use optim::{Adam, AdamConfig};
pub use params::{Init, ParamStore, Params};
