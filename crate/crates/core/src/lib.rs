//! Pose estimation and 2D-3D correspondence evaluation built around a
//! bidirectional projected Chamfer relaxation of blind PnP.
//!
//! Modules, bottom-up:
//! - [`geometry`]: pinhole projection, SE(3) exponential/log maps.
//! - [`features`]: feature distances, threshold and nearest-feature matching.
//! - [`blindpnp`]: inlier counts over explicit matchings and their matching-free relaxation.
//! - [`chamfer`]: projected Chamfer cost, its twist gradient and the pose solver.
//! - [`keypoint`]: 2D-guided 3D keypoint selection and the keypoint losses.
//! - [`pnp`]: DLT, nonlinear refinement and RANSAC baseline.
//! - [`synth`]: deterministic synthetic scene pairs.
//! - [`io`]: scene directories, keypoint/correspondence CSVs, PLY and solver traces.
//! - [`eval`]: IR/RR metrics and the batch pipeline behind the `mincd` binary.
//! - [`harness`]: seeded inequality and gradient-check trials.

pub mod blindpnp;
pub mod chamfer;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod harness;
pub mod io;
pub mod keypoint;
pub mod pnp;
pub mod synth;

pub use geometry::{CameraIntrinsics, Pixel, Point3, Pose, Twist};
