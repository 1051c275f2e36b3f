//! Benchmark and inference-orchestration toolkit for AWGN (sigma = 50)
//! image denoising.
//!
//! The crate covers the evaluation protocol (PSNR/SSIM, competition
//! ranking), deterministic noise synthesis, inference-time techniques
//! (tiled inference with blending, D4 self-ensemble, weighted and
//! edge-guided model fusion), a loss zoo, and the generalized denoising
//! score matching coefficient math with a Monte-Carlo oracle.

pub mod denoisers;
pub mod ensemble;
pub mod error;
pub mod filter;
pub mod gdsm;
pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod noise;
pub mod pipeline;
pub mod stats;
pub mod swt;
pub mod tiling;

pub use denoisers::{Denoiser, DenoiserSpec};
pub use error::{Error, Result};
pub use image::{apply_transform, to_float, to_u8, GeomTransform, ImageF, ImageU8};
