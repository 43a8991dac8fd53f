//! Continuous-scale image super-resolution from a flow-matched detail latent
//! rendered through a 2D Gaussian splatting field.
//!
//! The crate is organised bottom-up:
//!
//! * [`diffarray`]: reverse-mode tape, parameters, optimizers, checkpoints.
//! * [`imaging`]: images, bicubic resampling, degradation, synthetic data.
//! * [`gsfield`]: Gaussian kernel bank, windowed splatting, dense oracle.
//! * [`flowcore`]: flow matching with shortcut consistency and Euler sampling.
//! * [`latentnet`]: detail/condition encoders and the scale-aware fusion decoder.
//! * [`pipeline`]: two-stage training and end-to-end inference.
//! * [`metrics`]: PSNR, SSIM, random-projection Fréchet distance, sliced Wasserstein.

pub mod diffarray;
pub mod error;
pub mod flowcore;
pub mod gsfield;
pub mod imaging;
pub mod latentnet;
pub mod metrics;
pub mod nn;
pub mod pipeline;

pub use diffarray::{Graph, ParamStore, Tensor, Var};
pub use error::{Error, Result};
pub use imaging::{Image, ImagePair};
