//! 3D-prior-guided denoising diffusion for blind face restoration.
//!
//! The pipeline: degrade clean images into training inputs, reconstruct a
//! 3D facial prior render from morphable-model coefficients, train a
//! noise-prediction U-Net whose features fuse with multi-level prior
//! features through a time-aware fusion block, and restore images by
//! truncated sampling.

pub mod autodiff;
pub mod error;
pub mod nnblocks;
pub mod par;
pub mod schedule;
pub mod util;

pub use error::{CoreError, Result};
