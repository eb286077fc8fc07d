//! Parallax-tolerant image stitching with a recurrent elastic warp.
//!
//! A global homography is estimated from four corner displacements, then a
//! thin-plate spline with a zero-displacement edge ring corrects the remaining
//! local misalignment inside the overlap. Both stages refine their parameters by
//! accumulating per-iteration residual updates proposed from a correlation cost
//! volume and a photometric least-squares step.
//!
//! Geometry and raster code is generic over [`Real`] (`f32` or `f64`); the
//! alignment pipeline runs in `f64`. The aliases below name the common
//! instantiations.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod align;
pub mod error;
pub mod homography;
pub mod imageio;
pub mod linalg;
pub mod metrics;
pub mod raster;
pub mod scalar;
pub mod synth;
pub mod tps;
pub mod warp;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Image64 = raster::Image<f64>;
pub type Image32 = raster::Image<f32>;
pub type Grid64 = raster::Grid<f64>;
pub type Grid32 = raster::Grid<f32>;
pub type Homography64 = homography::Homography<f64>;
pub type Homography32 = homography::Homography<f32>;
pub type CornerSet64 = homography::CornerSet<f64>;
pub type CornerDisplacement64 = homography::CornerDisplacement<f64>;
pub type ControlGrid64 = tps::ControlGrid<f64>;
pub type ControlGrid32 = tps::ControlGrid<f32>;
pub type TpsCoefficients64 = tps::TpsCoefficients<f64>;
pub type WarpField64 = tps::WarpField<f64>;
pub type WarpField32 = tps::WarpField<f32>;
pub type Canvas64 = warp::Canvas<f64>;
