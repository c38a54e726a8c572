//! Structure-preserving sparse (SPS) feature maps and a multi-stage
//! instance-mask refinement head built on them, together with dense
//! reference implementations and an analytic FLOP accountant.
//!
//! Module map:
//! - [`tensor`]: dense grids, feature pyramid, RoIAlign, dense convolution
//! - [`sps`]: the sparse map (active rows, deduplicated passive rows, index grid)
//! - [`ops`]: 2D operations evaluated at active cells only
//! - [`pipeline`]: dense stage 0, three sparse refinement stages, masks, scores, losses
//! - [`oracle`]: dense / sparse-on-dense references and FLOP counting
//! - [`config`], [`weights`]: head configuration and the weight file format

pub mod config;
pub mod error;
mod kernels;
pub mod ops;
pub mod oracle;
pub mod params;
pub mod pipeline;
pub mod random;
pub mod shape;
pub mod sps;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
