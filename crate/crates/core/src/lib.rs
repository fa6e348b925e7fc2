//! Dose-voxel-kernel toolkit.
//!
//! Two halves live in this crate:
//!
//! * a small neural-network engine ([`nn`], [`optim`], [`loss`]) with hand-written
//!   forward/backward passes, used to build and train the density-to-dose U-Net in
//!   [`unet`];
//! * the classical dose pipeline in [`dosimetry`]: 3D convolution of decay maps with
//!   dose-voxel kernels, energy-to-dose conversion and a deterministic analytic
//!   stand-in for Monte-Carlo kernel generation.
//!
//! Everything is `f64`. Reductions run in a fixed order, so results do not depend on
//! the number of worker threads when the `parallel` feature is enabled.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dosimetry;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod par;
pub mod pca;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::Tensor;
