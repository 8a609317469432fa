//! Hybrid single-/multi-image super-resolution for 4-band satellite tiles.
//!
//! The crate covers the full desk-scale workflow: synthesizing ground-truth
//! scenes with land-cover labels, degrading them into low-resolution revisit
//! stacks, preparing patch datasets, training the fusion/transformer SR
//! network, scoring outputs with image-quality and segmentation metrics, and
//! training a small land-cover model on the results.

pub mod autodiff;
pub mod datapipe;
pub mod error;
pub mod harness;
pub mod image;
pub mod landcover;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod synthdata;
pub mod train;
pub mod kernels;
pub mod rng;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use tensor::{Scalar, Tensor};
