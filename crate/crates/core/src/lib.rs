//! Line-based structure from motion for panoramic indoor captures.
//!
//! The pipeline takes pre-extracted line segments, per-frame surface normal
//! maps and drifting IMU rotations, and produces camera translations and a
//! 3D line model:
//!
//! 1. [`preprocess`] merges collinear neighbors and drops short segments;
//! 2. [`manhattan`] votes interpretation planes on a Gaussian sphere to find
//!    the three orthogonal scene directions;
//! 3. [`rotation`] refines camera rotations against those directions;
//! 4. [`tracking`] links segments across nearby frames;
//! 5. [`coplanarity`] finds coplanar segment pairs from the normal maps;
//! 6. [`sfm`] solves a bounded linear least-squares problem for translations
//!    and depths;
//! 7. [`ba`] refines everything with a line bundle adjustment.
//!
//! [`synth`] generates synthetic scenes with ground truth for testing.

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod ba;
pub mod config;
pub mod coplanarity;
pub mod error;
pub mod eval;
pub mod export;
pub mod geometry;
pub mod io;
pub mod manhattan;
pub mod pipeline;
pub mod preprocess;
pub mod qp;
pub mod rotation;
pub mod sfm;
pub mod synth;
pub mod tracking;
pub mod union_find;

pub use config::PipelineConfig;
pub use error::{Error, ErrorClass, Result};
pub use geometry::{Axis, FrameRotations, Intrinsics, LineSegment2D, ManhattanFrame, Rotation, UnitVec3};
pub use io::dataset::Dataset;
