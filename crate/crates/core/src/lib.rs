//! Learning-to-hash with a triplet quantization loss.
//!
//! A small embedding network is trained first with a margin triplet loss
//! and then fine-tuned with a loss that pushes similar pairs onto the same
//! side of the 0.5 threshold in every dimension while keeping dissimilar
//! pairs apart. Latent features are thresholded into packed binary codes
//! and retrieval quality is compared between Euclidean ranking of the
//! real-valued features and Hamming ranking of the codes.

mod binio;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod hashing;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod params;
pub mod pipeline;

pub use error::{Error, Result};
