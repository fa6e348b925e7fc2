//! Layer kernels and the layer-graph [`Network`].
//!
//! Batched tensors are NHWC (`[n, h, w, c]`) for image layers and `[n, features]` for
//! dense layers. Each kernel module exposes plain forward/backward functions; the
//! network wires them together and owns parameters, caches and mode.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod dropout;
pub mod init;
pub mod network;
pub mod pool;
pub mod skip;
pub mod upsample;

pub use activation::Activation;
pub use init::{init_lecun, InitDistribution};
pub use network::{Layer, LayerSpec, LayerState, Mode, Network, Param, ParamKind, Trace};
