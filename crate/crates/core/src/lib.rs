//! Masked two-stage diffusion posterior sampling for image restoration.
//!
//! The crate provides the diffusion mathematics, condition masks, the sampler
//! loops, a trainable condition corrector, reference denoisers, the blind
//! degradation pipeline, quality metrics and the file formats used by the
//! `dpi` command line tool.

pub mod corrector;
pub mod dataset;
pub mod degradation;
pub mod denoiser;
pub mod error;
pub mod image;
pub mod io;
pub mod jpeg;
pub mod masks;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod selftest;
pub mod train;

pub use error::{DpiError, Result};
pub use image::ImageTensor;
pub use schedule::{DenoiserOutput, NoiseSchedule};
