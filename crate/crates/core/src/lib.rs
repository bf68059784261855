//! Dual-decoder image colorization.
//!
//! A convolutional encoder reads the luminance channel of a Lab image. A
//! pixel decoder upsamples its features back to full resolution, while a
//! query-based color decoder distils a small set of color embeddings from
//! the multi-scale pixel features. The product of the two yields the
//! chrominance prediction.

pub mod ablation;
pub mod color_decoder;
pub mod colorspace;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pixel_decoder;
pub mod train;

pub use error::{Error, Result};
