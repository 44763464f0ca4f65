//! Volumetric brain-tumor segmentation toolkit.
//!
//! Stages, in pipeline order:
//!
//! * [`volume`]: grid types and NIfTI-1 I/O
//! * [`preprocess`]: intensity cleanup, normalization, resampling, cropping
//! * [`model`]: a small MedNeXt-style forward/backward engine
//! * [`losses`]: Dice-Focal, Sobel boundary loss, deep supervision
//! * [`inference`]: sliding windows, flip TTA, weighted ensembles, restoration
//! * [`postprocess`]: thresholding, connected-component pruning, hierarchy, fusion
//! * [`metrics`]: DSC, NSD and their lesion-wise variants
//!
//! Data-parallel loops use rayon when the `parallel` feature is enabled
//! (default) and run sequentially otherwise, with identical results.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod inference;
pub mod metrics;
pub mod losses;
pub mod model;
pub mod par;
pub mod postprocess;
pub mod preprocess;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
