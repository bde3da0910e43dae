//! Oriented normal estimation for point clouds.
//!
//! A per-shape scalar field is fitted so that its normalized input gradient
//! gives a consistently oriented but coarse normal at every point (`ngl`).
//! A second network trained on many shapes learns the angle between a
//! candidate vector and the true normal from a local patch; each coarse
//! vector is then replaced by the best of a set of nearby candidates (`gvo`).
//! Classical baselines and metrics live in `eval`.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod eval;
pub mod gvo;
pub mod ngl;
pub mod nn;
pub mod pointcloud;

pub use error::{Error, Result};
pub use ngl::{NormalField, Stage};
pub use pointcloud::{PointCloud, SpatialIndex, Transform, Vec3};
