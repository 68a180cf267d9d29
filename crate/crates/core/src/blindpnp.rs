//! Inlier counting for blind PnP.
//!
//! `kappa` counts inliers of an explicit matching under a pose. `kappa_star`
//! drops the matching and counts, in both directions, keypoints whose nearest
//! counterpart in the image plane lies within `tau` squared pixels. For any
//! one-to-one matching `kappa <= kappa_star`, which [`check_inequality`] asserts
//! per instance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{CorrespondenceSet, FeatureError, KeypointSet2D, KeypointSet3D};
use crate::geometry::{se3_exp, CameraIntrinsics, Pixel, Pose, Twist, DEFAULT_Z_MIN};

pub const DEFAULT_TAU: f64 = 5.0;
pub const DEFAULT_GRID_LIMIT: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BlindPnpError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("inequality check requires a one-to-one correspondence set")]
    NotOneToOne,
    #[error("pose grid has {size} cells, limit is {limit}")]
    GridTooLarge { size: usize, limit: usize },
    #[error("invalid inlier threshold {0}")]
    InvalidTau(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InlierConfig {
    /// Squared-pixel inlier threshold.
    pub tau: f64,
}

impl Default for InlierConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU }
    }
}

impl InlierConfig {
    pub fn new(tau: f64) -> Result<Self, BlindPnpError> {
        if !(tau > 0.0) {
            return Err(BlindPnpError::InvalidTau(tau));
        }
        Ok(Self { tau })
    }
}

/// Projections of every point; `None` for points not in front of the camera.
pub(crate) fn project_all(p3d: &KeypointSet3D, pose: &Pose, k: &CameraIntrinsics) -> Vec<Option<Pixel>> {
    p3d.points()
        .iter()
        .map(|p| k.project_camera_point(&pose.transform(p), DEFAULT_Z_MIN).ok())
        .collect()
}

/// Number of pairs in `c` with squared reprojection error within `tau`.
pub fn kappa(
    pose: &Pose,
    c: &CorrespondenceSet,
    i2d: &KeypointSet2D,
    p3d: &KeypointSet3D,
    k: &CameraIntrinsics,
    cfg: &InlierConfig,
) -> Result<usize, BlindPnpError> {
    c.validate(i2d.len(), p3d.len())?;
    let pixels = i2d.pixels();
    let points = p3d.points();
    Ok(c.iter()
        .filter(|pair| {
            k.project_camera_point(&pose.transform(&points[pair.j]), DEFAULT_Z_MIN)
                .map(|proj| (pixels[pair.i] - proj).norm_squared() <= cfg.tau)
                .unwrap_or(false)
        })
        .count())
}

/// Two-sided nearest-neighbor inlier count.
pub fn kappa_star(
    pose: &Pose,
    i2d: &KeypointSet2D,
    p3d: &KeypointSet3D,
    k: &CameraIntrinsics,
    cfg: &InlierConfig,
) -> usize {
    let projected = project_all(p3d, pose, k);
    let valid: Vec<Pixel> = projected.iter().flatten().copied().collect();
    let pixels = i2d.pixels();
    let min_sq = |x: &Pixel, set: &[Pixel]| {
        set.iter().map(|y| (x - y).norm_squared()).fold(f64::INFINITY, f64::min)
    };
    let forward = pixels.iter().filter(|q| min_sq(q, &valid) <= cfg.tau).count();
    let backward = valid.iter().filter(|proj| min_sq(proj, pixels) <= cfg.tau).count();
    forward + backward
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InequalityCheck {
    pub kappa: usize,
    pub kappa_star: usize,
    pub holds: bool,
}

/// Evaluates both counts and whether `kappa <= kappa_star`.
pub fn check_inequality(
    pose: &Pose,
    c: &CorrespondenceSet,
    i2d: &KeypointSet2D,
    p3d: &KeypointSet3D,
    k: &CameraIntrinsics,
    cfg: &InlierConfig,
) -> Result<InequalityCheck, BlindPnpError> {
    if !c.is_one_to_one() {
        return Err(BlindPnpError::NotOneToOne);
    }
    let kappa = kappa(pose, c, i2d, p3d, k, cfg)?;
    let kappa_star = kappa_star(pose, i2d, p3d, k, cfg);
    Ok(InequalityCheck {
        kappa,
        kappa_star,
        holds: kappa <= kappa_star,
    })
}

/// One twist component of a pose grid: `steps` values spanning
/// `center ± half_width` (just `center` when `steps == 1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub center: f64,
    pub half_width: f64,
    pub steps: usize,
}

impl GridAxis {
    pub fn fixed(center: f64) -> Self {
        Self { center, half_width: 0.0, steps: 1 }
    }

    pub fn value(&self, k: usize) -> f64 {
        if self.steps <= 1 {
            self.center
        } else {
            self.center - self.half_width + 2.0 * self.half_width * k as f64 / (self.steps - 1) as f64
        }
    }
}

/// Grid of twist increments `xi`, each producing the pose `exp(xi) ∘ seed`.
/// Axes are ordered `(omega_x, omega_y, omega_z, v_x, v_y, v_z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseGrid {
    pub seed: Pose,
    pub axes: [GridAxis; 6],
    #[serde(default = "default_limit")]
    pub limit: usize,
}

fn default_limit() -> usize {
    DEFAULT_GRID_LIMIT
}

impl PoseGrid {
    pub fn single(seed: Pose) -> Self {
        Self {
            seed,
            axes: [GridAxis::fixed(0.0); 6],
            limit: DEFAULT_GRID_LIMIT,
        }
    }

    pub fn cardinality(&self) -> usize {
        self.axes.iter().map(|a| a.steps.max(1)).product()
    }

    /// Pose of the `idx`-th cell; the last axis varies fastest.
    pub fn pose_at(&self, mut idx: usize) -> Pose {
        let mut x = [0.0; 6];
        for a in (0..6).rev() {
            let steps = self.axes[a].steps.max(1);
            x[a] = self.axes[a].value(idx % steps);
            idx /= steps;
        }
        let xi = Twist::from_vector(&nalgebra::Vector6::from(x));
        se3_exp(&xi).compose(&self.seed)
    }
}

/// Exhaustive maximization of `kappa_star` over a pose grid. Ties keep the
/// first cell in enumeration order.
pub fn brute_force_best_pose(
    i2d: &KeypointSet2D,
    p3d: &KeypointSet3D,
    k: &CameraIntrinsics,
    cfg: &InlierConfig,
    grid: &PoseGrid,
) -> Result<(Pose, usize), BlindPnpError> {
    let size = grid.cardinality();
    if size > grid.limit {
        return Err(BlindPnpError::GridTooLarge { size, limit: grid.limit });
    }
    let (idx, count) = (0..size)
        .into_par_iter()
        .map(|idx| (idx, kappa_star(&grid.pose_at(idx), i2d, p3d, k, cfg)))
        .reduce(
            || (usize::MAX, 0),
            |a, b| {
                if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
                    b
                } else {
                    a
                }
            },
        );
    Ok((grid.pose_at(idx), count))
}
