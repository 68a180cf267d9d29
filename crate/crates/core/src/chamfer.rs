//! Bidirectional projected Chamfer cost and pose solver.
//!
//! The cost between detected pixels `KI` and projected 3D keypoints `KP` is
//!
//! ```text
//! sum_q min_p |q - π(T p)|² + sum_p min_q |q - π(T p)|²
//! ```
//!
//! Gradients treat the nearest-neighbor assignments as fixed at their current
//! argmin. Poses are updated by left increments `exp(xi) ∘ T0`.

use nalgebra::{Matrix2x6, Matrix6, Vector2, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::KeypointSet2D;
use crate::features::KeypointSet3D;
use crate::geometry::{
    se3_exp, transformed_point_jacobian, CameraIntrinsics, Pixel, Pose, Twist, DEFAULT_Z_MIN,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChamferError {
    #[error("keypoint sets must be nonempty")]
    EmptySet,
    #[error("no 3D keypoint projects in front of the camera")]
    AllPointsBehindCamera,
    #[error("solver diverged: no cost decrease after {0} exhausted line searches")]
    Divergence(usize),
    #[error("non-finite objective input")]
    NonFiniteInput,
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
}

/// Treatment of 3D keypoints that fall behind the camera on the point side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum BehindCameraPolicy {
    /// Contributes nothing.
    #[default]
    Exclude,
    /// Contributes a constant squared-pixel penalty.
    Penalty(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChamferOptions {
    pub z_min: f64,
    pub behind_camera: BehindCameraPolicy,
}

impl Default for ChamferOptions {
    fn default() -> Self {
        Self {
            z_min: DEFAULT_Z_MIN,
            behind_camera: BehindCameraPolicy::Exclude,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChamferReport {
    /// Total cost in squared pixels.
    pub value: f64,
    /// Per-pixel nearest squared distance.
    pub forward_terms: Vec<f64>,
    /// Per-point nearest squared distance; penalty or 0 for points behind the camera.
    pub backward_terms: Vec<f64>,
    /// Nearest projected point for every pixel.
    pub forward_assignment: Vec<usize>,
    /// Nearest pixel for every point; `None` when the point is behind the camera.
    pub backward_assignment: Vec<Option<usize>>,
}

fn nearest(x: &Pixel, candidates: impl Iterator<Item = (usize, Pixel)>) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (idx, y) in candidates {
        let d = (x - y).norm_squared();
        if d < best.1 {
            best = (idx, d);
        }
    }
    best
}

pub fn chamfer_cost(
    pose: &Pose,
    ki: &KeypointSet2D,
    kp: &KeypointSet3D,
    k: &CameraIntrinsics,
) -> Result<ChamferReport, ChamferError> {
    chamfer_cost_with(pose, ki, kp, k, &ChamferOptions::default())
}

pub fn chamfer_cost_with(
    pose: &Pose,
    ki: &KeypointSet2D,
    kp: &KeypointSet3D,
    k: &CameraIntrinsics,
    opts: &ChamferOptions,
) -> Result<ChamferReport, ChamferError> {
    if ki.is_empty() || kp.is_empty() {
        return Err(ChamferError::EmptySet);
    }
    let projected: Vec<Option<Pixel>> = kp
        .points()
        .iter()
        .map(|p| k.project_camera_point(&pose.transform(p), opts.z_min).ok())
        .collect();
    if projected.iter().all(Option::is_none) {
        return Err(ChamferError::AllPointsBehindCamera);
    }
    let valid = || projected.iter().enumerate().filter_map(|(j, p)| p.map(|p| (j, p)));

    let pixels = ki.pixels();
    let (forward_assignment, forward_terms): (Vec<usize>, Vec<f64>) =
        pixels.iter().map(|q| nearest(q, valid())).unzip();

    let penalty = match opts.behind_camera {
        BehindCameraPolicy::Exclude => 0.0,
        BehindCameraPolicy::Penalty(c) => c,
    };
    let (backward_assignment, backward_terms): (Vec<Option<usize>>, Vec<f64>) = projected
        .iter()
        .map(|proj| match proj {
            Some(pr) => {
                let (i, d) = nearest(pr, pixels.iter().copied().enumerate());
                (Some(i), d)
            }
            None => (None, penalty),
        })
        .unzip();

    let value = forward_terms.iter().sum::<f64>() + backward_terms.iter().sum::<f64>();
    Ok(ChamferReport {
        value,
        forward_terms,
        backward_terms,
        forward_assignment,
        backward_assignment,
    })
}

/// Visits every active `(pixel index, point index)` term of a report.
fn active_pairs(report: &ChamferReport) -> impl Iterator<Item = (usize, usize)> + '_ {
    let fwd = report.forward_assignment.iter().enumerate().map(|(i, &j)| (i, j));
    let bwd = report
        .backward_assignment
        .iter()
        .enumerate()
        .filter_map(|(j, i)| i.map(|i| (i, j)));
    fwd.chain(bwd)
}

/// Per-point projection residual Jacobians (pixel w.r.t. twist) at `exp(xi) ∘ base`.
fn point_jacobians(
    xi: &Twist,
    base: &Pose,
    kp: &KeypointSet3D,
    k: &CameraIntrinsics,
    report: &ChamferReport,
) -> Vec<Option<(Pixel, Matrix2x6<f64>)>> {
    kp.points()
        .iter()
        .zip(&report.backward_assignment)
        .map(|(p, assigned)| {
            assigned.map(|_| {
                let (x, dx) = transformed_point_jacobian(xi, base, p);
                let proj = Pixel::new(k.fu * x.x / x.z + k.cu, k.fv * x.y / x.z + k.cv);
                (proj, k.projection_jacobian(&x) * dx)
            })
        })
        .collect()
}

/// Gradient of the Chamfer cost at `exp(xi) ∘ base` with respect to `xi`.
pub fn chamfer_grad_twist(
    xi: &Twist,
    base: &Pose,
    ki: &KeypointSet2D,
    kp: &KeypointSet3D,
    k: &CameraIntrinsics,
) -> Result<Vector6<f64>, ChamferError> {
    let pose = se3_exp(xi).compose(base);
    let report = chamfer_cost(&pose, ki, kp, k)?;
    let jacs = point_jacobians(xi, base, kp, k, &report);
    let pixels = ki.pixels();
    let mut grad = Vector6::zeros();
    for (i, j) in active_pairs(&report) {
        let (proj, a) = jacs[j].as_ref().expect("active point is in front of the camera");
        let r: Vector2<f64> = proj - pixels[i];
        grad += a.transpose() * r * 2.0;
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverMethod {
    GradientDescent,
    GaussNewton,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub method: SolverMethod,
    /// Stop when the relative cost decrease of an accepted step falls below this.
    pub rel_tolerance: f64,
    /// Stop when the cost itself falls below this (squared pixels).
    pub abs_tolerance: f64,
    /// Levenberg damping added to the Gauss-Newton normal equations.
    pub damping: f64,
    /// Twist norm of the first trial step for gradient descent.
    pub initial_step: f64,
    pub armijo_c: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    /// Consecutive exhausted line searches tolerated before giving up.
    pub patience: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            method: SolverMethod::GaussNewton,
            rel_tolerance: 1e-12,
            abs_tolerance: 1e-18,
            damping: 1e-3,
            initial_step: 0.05,
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
            max_backtracks: 30,
            patience: 5,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), ChamferError> {
        let bad = |m: &str| Err(ChamferError::InvalidConfig(m.to_string()));
        if self.max_iters < 1 {
            return bad("max_iters must be >= 1");
        }
        if !(self.rel_tolerance > 0.0 && self.abs_tolerance > 0.0) {
            return bad("tolerances must be > 0");
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return bad("backtrack factor must be in (0, 1)");
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return bad("armijo constant must be in (0, 1)");
        }
        if !(self.damping >= 0.0 && self.initial_step > 0.0) {
            return bad("damping must be >= 0 and initial step > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverIteration {
    pub iteration: usize,
    pub cost: f64,
    /// Line-search step length accepted at this iteration (0 for the initial row).
    pub step: f64,
    #[serde(skip)]
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveResult {
    pub pose: Pose,
    pub cost: f64,
    pub trace: Vec<SolverIteration>,
    pub converged: bool,
}

/// Linearization shared by the Chamfer and reprojection solvers.
pub(crate) struct Linearization {
    pub cost: f64,
    pub gradient: Vector6<f64>,
    pub jtj: Matrix6<f64>,
}

fn linearize_chamfer(
    pose: &Pose,
    ki: &KeypointSet2D,
    kp: &KeypointSet3D,
    k: &CameraIntrinsics,
) -> Result<Linearization, ChamferError> {
    let report = chamfer_cost(pose, ki, kp, k)?;
    let jacs = point_jacobians(&Twist::zero(), pose, kp, k, &report);
    let pixels = ki.pixels();
    let mut gradient = Vector6::zeros();
    let mut jtj = Matrix6::zeros();
    for (i, j) in active_pairs(&report) {
        let (proj, a) = jacs[j].as_ref().expect("active point is in front of the camera");
        let r: Vector2<f64> = proj - pixels[i];
        gradient += a.transpose() * r * 2.0;
        jtj += a.transpose() * a * 2.0;
    }
    Ok(Linearization {
        cost: report.value,
        gradient,
        jtj,
    })
}

/// Search direction in twist space for the configured method.
pub(crate) fn descent_direction(lin: &Linearization, cfg: &SolverConfig, damping: f64) -> Vector6<f64> {
    match cfg.method {
        SolverMethod::GaussNewton => {
            let mut h = lin.jtj;
            for d in 0..6 {
                h[(d, d)] += damping * (1.0 + h[(d, d)]);
            }
            match h.cholesky() {
                Some(ch) => -ch.solve(&lin.gradient),
                None => -lin.gradient,
            }
        }
        SolverMethod::GradientDescent => {
            let n = lin.gradient.norm();
            if n > 0.0 {
                -lin.gradient * (cfg.initial_step / n)
            } else {
                Vector6::zeros()
            }
        }
    }
}

/// Generic damped descent with Armijo backtracking. `linearize` evaluates the
/// cost model at a pose, `cost` re-evaluates the exact cost.
pub(crate) fn minimize<L, C, E>(
    init: &Pose,
    cfg: &SolverConfig,
    mut linearize: L,
    mut cost: C,
    diverged: impl Fn(usize) -> E,
) -> Result<SolveResult, E>
where
    L: FnMut(&Pose) -> Result<Linearization, E>,
    C: FnMut(&Pose) -> Option<f64>,
{
    let mut pose = *init;
    let mut lin = linearize(&pose)?;
    let initial_cost = lin.cost;
    let mut trace = vec![SolverIteration {
        iteration: 0,
        cost: lin.cost,
        step: 0.0,
        pose,
    }];
    let mut damping = cfg.damping;
    let mut failures = 0;
    let mut converged = lin.cost <= cfg.abs_tolerance;

    let mut iter = 0;
    while !converged && iter < cfg.max_iters {
        iter += 1;
        let dir = descent_direction(&lin, cfg, damping);
        let slope = lin.gradient.dot(&dir);
        let mut accepted = None;
        if slope < 0.0 {
            let mut alpha = 1.0;
            for _ in 0..=cfg.max_backtracks {
                let cand = se3_exp(&Twist::from_vector(&(dir * alpha))).compose(&pose);
                if let Some(c) = cost(&cand) {
                    if c <= lin.cost + cfg.armijo_c * alpha * slope {
                        accepted = Some((cand, c, alpha));
                        break;
                    }
                }
                alpha *= cfg.backtrack_factor;
            }
        }
        match accepted {
            Some((cand, c, alpha)) => {
                let prev = lin.cost;
                pose = cand;
                lin = linearize(&pose)?;
                // Re-linearization recomputes the same exact cost.
                debug_assert!((lin.cost - c).abs() <= 1e-9 * (1.0 + c));
                trace.push(SolverIteration {
                    iteration: iter,
                    cost: lin.cost,
                    step: alpha,
                    pose,
                });
                failures = 0;
                damping = (damping * 0.5).max(cfg.damping);
                if lin.cost <= cfg.abs_tolerance || prev - lin.cost <= cfg.rel_tolerance * prev {
                    converged = true;
                }
            }
            None => {
                trace.push(SolverIteration {
                    iteration: iter,
                    cost: lin.cost,
                    step: 0.0,
                    pose,
                });
                failures += 1;
                damping = damping.max(1e-6) * 10.0;
                if failures >= cfg.patience {
                    if lin.cost < initial_cost {
                        // Stalled at a kink of the piecewise cost after making progress.
                        converged = true;
                    } else {
                        return Err(diverged(failures));
                    }
                }
            }
        }
    }
    Ok(SolveResult {
        pose,
        cost: lin.cost,
        trace,
        converged,
    })
}

/// Minimizes the Chamfer cost over the pose starting from `init`.
pub fn solve_pose_chamfer(
    init: &Pose,
    ki: &KeypointSet2D,
    kp: &KeypointSet3D,
    k: &CameraIntrinsics,
    cfg: &SolverConfig,
) -> Result<SolveResult, ChamferError> {
    cfg.validate()?;
    minimize(
        init,
        cfg,
        |pose| linearize_chamfer(pose, ki, kp, k),
        |pose| chamfer_cost(pose, ki, kp, k).ok().map(|r| r.value),
        ChamferError::Divergence,
    )
}

pub const DEFAULT_LAMBDA1: f64 = 0.2;
pub const DEFAULT_LAMBDA2: f64 = 1e-4;
pub const DEFAULT_WARMUP_EPOCHS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight on the keypoint loss.
    pub lambda1: f64,
    /// Weight on the Chamfer loss.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: DEFAULT_LAMBDA1,
            lambda2: DEFAULT_LAMBDA2,
        }
    }
}

impl LossWeights {
    /// Training-time schedule: both weights are zero during warm-up epochs.
    pub fn for_epoch(&self, epoch: usize, warmup_epochs: usize) -> Self {
        if epoch < warmup_epochs {
            Self { lambda1: 0.0, lambda2: 0.0 }
        } else {
            *self
        }
    }
}

/// `corr_loss + λ1·key_loss + λ2·chamfer_value`. `corr_loss` is whatever
/// correspondence loss the caller trains with.
pub fn mincd_objective(
    corr_loss: f64,
    key_loss: f64,
    chamfer_value: f64,
    w: &LossWeights,
) -> Result<f64, ChamferError> {
    let inputs = [corr_loss, key_loss, chamfer_value, w.lambda1, w.lambda2];
    if inputs.iter().any(|x| !x.is_finite()) {
        return Err(ChamferError::NonFiniteInput);
    }
    Ok(corr_loss + w.lambda1 * key_loss + w.lambda2 * chamfer_value)
}
