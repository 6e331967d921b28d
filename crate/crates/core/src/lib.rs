//! Convolutional synthesis reconstruction with spatially adaptive
//! weighted-l1 regularization.
//!
//! The reconstruction pipeline splits a zero-filled image into a smooth part
//! and a detail part, represents the detail part as a sum of convolutions of
//! a fixed filter bank with sparse complex code maps, and estimates the codes
//! with a fixed number of FISTA iterations whose soft-threshold levels come
//! from per-filter, per-pixel maps. The maps can be constant, heuristic, or
//! produced by a small encoder-decoder network trained end to end through
//! the unrolled solver.

pub mod activation;
pub mod dictionary;
pub mod error;
pub mod fft;
pub mod highpass;
pub mod image;
pub mod io;
pub mod lambda_maps;
pub mod metrics;
pub mod operators;
pub mod simulate;
pub mod solvers;
pub mod training;

pub use error::{Error, Result};
pub use image::{inner, ComplexImage, RealImage};
pub use operators::{FeatureMaps, FilterBank, SamplingMask};
