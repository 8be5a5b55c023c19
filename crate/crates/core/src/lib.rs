//! One-class detection of generated multispectral satellite tiles.
//!
//! A three-level vector-quantized autoencoder is trained on pristine tiles
//! only; per-band reconstruction errors, thresholded at a calibrated false
//! alarm rate, flag generated imagery. A two-class CNN baseline and the
//! cross-dataset evaluation protocol sit alongside for comparison.

pub mod baseline;
pub mod cli;
pub mod detector;
pub mod error;
pub mod eval;
pub mod raster;
pub mod seed;
pub mod synthgen;
pub mod vqvae2;

pub use error::{Error, Result};
