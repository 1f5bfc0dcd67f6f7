//! Hierarchical three-stage ECG transformer.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: a small reverse-mode differentiation engine over dense
//!   arrays, with a finite-difference gradient checker.
//! - [`signal`]: recording container, preprocessing (resampling, zero-phase
//!   FIR bandpass, normalisation, cropping), synthetic ECG generation and
//!   fold splitting.
//! - [`model`]: the depthwise convolutional encoder, the three-stage
//!   transformer that forwards only the CLS token between stages, and the
//!   attention-gated inter-lead head.
//! - [`metrics`]: F-beta, G-beta, the weighted challenge score and macro AUC.
//! - [`harness`]: training, checkpoints, evaluation and attention export.

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod signal;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
