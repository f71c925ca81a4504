//! Edge-guided multi-scale WGAN-GP toolkit for blind motion deblurring.
//!
//! A lightweight edge generator restores sharp edges from the Sobel edges
//! of a blurred photo; a coarse-to-fine generator, conditioned on those
//! edges, restores the photo itself. Both are trained adversarially against
//! patch critics with a gradient penalty and a content loss combining pixel,
//! perceptual and dark-channel terms.

pub mod cli;
pub mod dataio;
pub mod edgeops;
pub mod error;
pub mod imgcore;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
