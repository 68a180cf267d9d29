//! Seeded random trials shared by the CLI checks and the test suites:
//! count-inequality instances and finite-difference gradient checks.

use nalgebra::{Vector3, Vector6};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::blindpnp::{check_inequality, InlierConfig};
use crate::chamfer::{chamfer_cost, chamfer_grad_twist, ChamferReport};
use crate::features::{Correspondence, CorrespondenceSet, KeypointSet2D, KeypointSet3D};
use crate::geometry::{se3_exp, CameraIntrinsics, Pixel, Point3, Pose, Twist};
use crate::pnp::pnp_cost_gradient;

pub const FD_STEP: f64 = 1e-6;

fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics { fu: 585.0, fv: 585.0, cu: 320.0, cv: 240.0 }
}

fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Pose {
    let mut v = || Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let w = v() * rot;
    let t = v() * trans;
    se3_exp(&Twist::new(w, t))
}

/// `n` points inside the camera frustum of `pose`, expressed in the cloud frame.
fn frustum_cloud(rng: &mut ChaCha8Rng, n: usize, pose: &Pose, k: &CameraIntrinsics) -> Vec<Point3> {
    let inv = pose.inverse();
    (0..n)
        .map(|_| {
            let q = Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let z = rng.random_range(1.0..10.0);
            Point3::from(inv.transform(&Point3::from(k.back_project(&q, z))))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InequalityTrial {
    pub instance: u64,
    pub n: usize,
    pub tau: f64,
    pub matched: usize,
    pub kappa: usize,
    pub kappa_star: usize,
    pub holds: bool,
}

/// Random instance with `M = N` in `[4, 64]`, a random partial one-to-one
/// matching and a random `tau`. Pixels are noisy projections, some replaced
/// by uniform samples, so both counts vary.
pub fn inequality_trial(seed: u64, instance: u64) -> InequalityTrial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(instance);
    let k = intrinsics();
    let n = rng.random_range(4..=64);
    let pose = random_pose(&mut rng, 0.3, 0.5);
    let cloud = frustum_cloud(&mut rng, n, &pose, &k);
    let sigma = rng.random_range(0.0..4.0);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let outlier_rate = rng.random_range(0.0..0.5);
    let pixels: Vec<Pixel> = cloud
        .iter()
        .map(|p| {
            if rng.random_bool(outlier_rate) {
                Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0))
            } else {
                let q = k.project_camera_point(&pose.transform(p), 1e-6).expect("frustum point");
                Pixel::new(q.x + sigma * noise.sample(&mut rng), q.y + sigma * noise.sample(&mut rng))
            }
        })
        .collect();
    let tau = rng.random_range(0.1..50.0);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    // Half the time keep the generating pairs, otherwise a random matching.
    let keep_truth = rng.random_bool(0.5);
    let matched = rng.random_range(0..=n);
    let pairs = (0..matched)
        .map(|i| Correspondence { i, j: if keep_truth { i } else { perm[i] }, score: 0.0 })
        .collect();
    let c = CorrespondenceSet::one_to_one(pairs).expect("distinct indices");
    let i2d = KeypointSet2D::from_pixels(pixels).expect("continuous samples are distinct");
    let p3d = KeypointSet3D::from_points(cloud).expect("finite points");
    let check = check_inequality(&pose, &c, &i2d, &p3d, &k, &InlierConfig { tau }).expect("valid instance");
    InequalityTrial {
        instance,
        n,
        tau,
        matched,
        kappa: check.kappa,
        kappa_star: check.kappa_star,
        holds: check.holds,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradTrial {
    pub instance: u64,
    /// Resampling attempts needed to find a switch-free instance.
    pub attempts: usize,
    pub grad_norm: f64,
    /// `|fd - analytic| / |analytic|` (Euclidean norms).
    pub rel_err: f64,
}

fn central_difference(f: impl Fn(&Vector6<f64>) -> f64, x: &Vector6<f64>, h: f64) -> Vector6<f64> {
    Vector6::from_fn(|d, _| {
        let mut e = Vector6::zeros();
        e[d] = h;
        (f(&(x + e)) - f(&(x - e))) / (2.0 * h)
    })
}

fn rel_err(fd: &Vector6<f64>, g: &Vector6<f64>) -> f64 {
    (fd - g).norm() / g.norm().max(f64::MIN_POSITIVE)
}

fn same_assignment(a: &ChamferReport, b: &ChamferReport) -> bool {
    a.forward_assignment == b.forward_assignment && a.backward_assignment == b.backward_assignment
}

const MAX_ATTEMPTS: usize = 50;

/// Finite-difference check of the Chamfer twist gradient on a random instance
/// whose nearest-neighbor assignments do not change within `±h` of `xi`.
pub fn chamfer_grad_trial(seed: u64, instance: u64) -> GradTrial {
    let k = intrinsics();
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(instance * MAX_ATTEMPTS as u64 + attempt as u64);
        let n = rng.random_range(4..=24);
        let truth = random_pose(&mut rng, 0.3, 0.5);
        let cloud = frustum_cloud(&mut rng, n, &truth, &k);
        let m = rng.random_range(4..=24);
        let pixels: Vec<Pixel> = (0..m)
            .map(|_| Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)))
            .collect();
        let base = truth.compose(&random_pose(&mut rng, 0.02, 0.05));
        let xi = Twist::new(
            Vector3::from_fn(|_, _| rng.random_range(-1e-2..1e-2)),
            Vector3::from_fn(|_, _| rng.random_range(-1e-2..1e-2)),
        );
        let ki = KeypointSet2D::from_pixels(pixels).expect("distinct pixels");
        let kp = KeypointSet3D::from_points(cloud).expect("finite points");
        let report_at = |x: &Vector6<f64>| chamfer_cost(&se3_exp(&Twist::from_vector(x)).compose(&base), &ki, &kp, &k);
        let x0 = xi.to_vector();
        let Ok(center) = report_at(&x0) else { continue };
        let stable = (0..6).all(|d| {
            [-FD_STEP, FD_STEP].iter().all(|&s| {
                let mut e = Vector6::zeros();
                e[d] = s;
                report_at(&(x0 + e)).is_ok_and(|r| same_assignment(&r, &center))
            })
        });
        if !stable {
            continue;
        }
        let g = chamfer_grad_twist(&xi, &base, &ki, &kp, &k).expect("evaluable instance");
        let fd = central_difference(|x| report_at(x).expect("stable instance").value, &x0, FD_STEP);
        return GradTrial { instance, attempts: attempt + 1, grad_norm: g.norm(), rel_err: rel_err(&fd, &g) };
    }
    panic!("no switch-free Chamfer instance in {MAX_ATTEMPTS} attempts");
}

/// Finite-difference check of the reprojection-cost twist gradient.
pub fn pnp_grad_trial(seed: u64, instance: u64) -> GradTrial {
    let k = intrinsics();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_9e37);
    rng.set_stream(instance);
    let n = rng.random_range(6..=40);
    let truth = random_pose(&mut rng, 0.3, 0.5);
    let cloud = frustum_cloud(&mut rng, n, &truth, &k);
    let noise = Normal::new(0.0, 2.0).expect("positive sigma");
    let pixels: Vec<Pixel> = cloud
        .iter()
        .map(|p| {
            let q = k.project_camera_point(&truth.transform(p), 1e-6).expect("frustum point");
            Pixel::new(q.x + noise.sample(&mut rng), q.y + noise.sample(&mut rng))
        })
        .collect();
    let base = truth.compose(&random_pose(&mut rng, 0.02, 0.05));
    let xi = Twist::new(
        Vector3::from_fn(|_, _| rng.random_range(-1e-2..1e-2)),
        Vector3::from_fn(|_, _| rng.random_range(-1e-2..1e-2)),
    );
    let ki = KeypointSet2D::from_pixels(pixels).expect("distinct pixels");
    let kp = KeypointSet3D::from_points(cloud).expect("finite points");
    let c = CorrespondenceSet::from_index_pairs((0..n).map(|i| (i, i)));
    let eval = |x: &Vector6<f64>| pnp_cost_gradient(&Twist::from_vector(x), &base, &c, &ki, &kp, &k).expect("points in front");
    let x0 = xi.to_vector();
    let g = eval(&x0).1;
    let fd = central_difference(|x| eval(x).0, &x0, FD_STEP);
    GradTrial { instance, attempts: 1, grad_norm: g.norm(), rel_err: rel_err(&fd, &g) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trials_are_deterministic() {
        assert_eq!(inequality_trial(3, 7), inequality_trial(3, 7));
        assert_eq!(chamfer_grad_trial(3, 7), chamfer_grad_trial(3, 7));
        assert_eq!(pnp_grad_trial(3, 7), pnp_grad_trial(3, 7));
        assert_ne!(inequality_trial(3, 7), inequality_trial(3, 8));
    }

    #[test]
    fn inequality_trials_cover_the_range() {
        let trials: Vec<InequalityTrial> = (0..200).map(|i| inequality_trial(0, i)).collect();
        assert!(trials.iter().all(|t| (4..=64).contains(&t.n) && t.holds));
        assert!(trials.iter().any(|t| t.kappa > 0));
        assert!(trials.iter().any(|t| t.kappa_star > t.kappa));
    }

    #[test]
    fn gradient_trials_pass() {
        for i in 0..10 {
            let c = chamfer_grad_trial(1, i);
            assert!(c.rel_err <= 1e-5, "{c:?}");
            let p = pnp_grad_trial(1, i);
            assert!(p.rel_err <= 1e-5, "{p:?}");
        }
    }
}
