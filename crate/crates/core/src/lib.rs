//! Self-supervised joint deblurring and denoising from long-exposure blurry and
//! short-exposure noisy image pairs.

pub mod blur;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evalreport;
pub mod imaging;
pub mod losses;
pub mod model;
pub mod nn;
pub mod noise;
pub mod rng;
pub mod sampler;
pub mod sharpmask;
pub mod train;

pub use error::{Error, Result};
