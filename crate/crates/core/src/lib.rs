//! Flow-guided video inpainting at desk scale.
//!
//! The crate implements the full mechanism stack of a propagation-based
//! video inpainting pipeline as deterministic forward passes:
//!
//! * [`grid`] — dense-grid primitives (sampling, convolution, resizing)
//! * [`flow`] — backward warping, forward/backward consistency, flow metrics
//! * [`align`] — deformable convolution and the two alignment variants
//! * [`flow_complete`] — Laplacian flow completion and the recurrent completion network
//! * [`image_prop`] — reliability-checked global image propagation
//! * [`feature_prop`] — encoder, flow-guided feature propagation, decoder
//! * [`msvt`] — mask-guided sparse video transformer blocks
//! * [`cost`] — analytic FLOPs model for dense vs. sparse attention
//! * [`metrics`] — PSNR/SSIM and the inpainting loss formulas
//! * [`synth`] — synthetic sequences with exact ground-truth motion
//! * [`pipeline`] — end-to-end orchestration and the weight archive
//!
//! Nothing here requires trained weights: the pipeline runs in a
//! propagation-only mode that is exact on integer-translation scenes, and
//! every learned component accepts seeded random weights for forward-pass
//! validation.

pub mod align;
pub mod cost;
pub mod error;
pub mod feature_prop;
pub mod flow;
pub mod flow_complete;
pub mod grid;
pub mod image_prop;
#[cfg(feature = "io")]
pub mod io;
pub mod metrics;
pub mod msvt;
pub mod pipeline;
pub mod reference;
pub mod synth;
mod util;
pub mod weights;

pub use error::{Error, Result};
pub use grid::{Grid, Kernel, ResizeMode};
