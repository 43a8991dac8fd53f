//! Continuous-scale Gaussian rendering: a bank of learnable kernels, per-pixel
//! soft assignment over the bank, windowed splatting of opacity-weighted
//! features, and a residual head producing the image correction.

mod kernel;
mod render;
mod splat;

pub use kernel::{covariance_from_scales, gaussian_pdf, gaussian_pdf_op, Cov2, MIN_DET};
pub use render::{
    compose_sr, compose_sr_graph, Contribution, GaussianBank, GaussianRenderer, Primitive, RenderConfig,
    BRUTEFORCE_MAX_SIDE,
};
pub use splat::{splat, splat_forward, SplatGrid};
