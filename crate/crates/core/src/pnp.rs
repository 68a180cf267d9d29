//! Correspondence-based PnP: linear DLT initializer, reprojection refinement
//! and a RANSAC wrapper.

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Matrix4, Vector2, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chamfer::{minimize, Linearization, SolveResult, SolverConfig};
use crate::features::{CorrespondenceSet, FeatureError, KeypointSet2D, KeypointSet3D};
use crate::geometry::{
    project_to_so3, transformed_point_jacobian, CameraIntrinsics, Pixel, Point3, Pose, Twist,
    DEFAULT_Z_MIN,
};

pub const MIN_LINEAR_POINTS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PnpError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("degenerate point configuration")]
    DegenerateConfiguration,
    #[error("a correspondence lies behind the camera")]
    PointBehindCamera,
    #[error("refinement diverged after {0} exhausted line searches")]
    Divergence(usize),
    #[error("best consensus has {best} inliers, below the sample size")]
    NoConsensus { best: usize },
    #[error("invalid ransac config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier threshold on the squared reprojection error, pixels².
    pub threshold: f64,
    pub sample_size: usize,
    /// Early-exit confidence; 1.0 disables early exit.
    pub confidence: f64,
    pub seed: u64,
}

impl RansacConfig {
    pub fn new(iterations: usize, threshold: f64, seed: u64) -> Self {
        Self {
            iterations,
            threshold,
            sample_size: MIN_LINEAR_POINTS,
            confidence: 0.999,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), PnpError> {
        let bad = |m: String| Err(PnpError::InvalidConfig(m));
        if self.iterations < 1 {
            return bad("iterations must be >= 1".into());
        }
        if !(self.threshold > 0.0) {
            return bad(format!("threshold must be > 0, got {}", self.threshold));
        }
        if self.sample_size < MIN_LINEAR_POINTS {
            return bad(format!("sample size must be >= {MIN_LINEAR_POINTS}"));
        }
        if !(self.confidence > 0.0 && self.confidence <= 1.0) {
            return bad(format!("confidence must be in (0, 1], got {}", self.confidence));
        }
        Ok(())
    }
}

fn gather(c: &CorrespondenceSet, ki: &KeypointSet2D, p: &KeypointSet3D) -> Result<(Vec<Pixel>, Vec<Point3>), PnpError> {
    c.validate(ki.len(), p.len())?;
    Ok(c.iter().map(|m| (ki.pixels()[m.i], p.points()[m.j])).unzip())
}

/// Similarity taking points to zero mean and mean distance `sqrt(dim)`.
fn normalizer<const D: usize>(pts: &[nalgebra::SVector<f64, D>]) -> (nalgebra::SVector<f64, D>, f64) {
    let n = pts.len() as f64;
    let mean = pts.iter().sum::<nalgebra::SVector<f64, D>>() / n;
    let spread = pts.iter().map(|x| (x - mean).norm()).sum::<f64>() / n;
    let scale = if spread > 0.0 { (D as f64).sqrt() / spread } else { 1.0 };
    (mean, scale)
}

fn dlt(pixels: &[Pixel], points: &[Point3], k: &CameraIntrinsics) -> Result<Pose, PnpError> {
    let n = pixels.len();
    if n < MIN_LINEAR_POINTS {
        return Err(PnpError::TooFewPoints { needed: MIN_LINEAR_POINTS, got: n });
    }
    let rays: Vec<Vector2<f64>> = pixels
        .iter()
        .map(|q| Vector2::new((q.x - k.cu) / k.fu, (q.y - k.cv) / k.fv))
        .collect();
    let coords: Vec<Vector3<f64>> = points.iter().map(|p| p.coords).collect();
    let (m2, s2) = normalizer(&rays);
    let (m3, s3) = normalizer(&coords);

    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (r, (x, xw)) in rays.iter().zip(&coords).enumerate() {
        let u = (x - m2) * s2;
        let xh = ((xw - m3) * s3).push(1.0);
        for c in 0..4 {
            a[(2 * r, c)] = xh[c];
            a[(2 * r, 8 + c)] = -u.x * xh[c];
            a[(2 * r + 1, 4 + c)] = xh[c];
            a[(2 * r + 1, 8 + c)] = -u.y * xh[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(PnpError::DegenerateConfiguration)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]));
    let sv = |i: usize| svd.singular_values[order[i]];
    // A one-dimensional null space needs the 11th singular value well above zero.
    if order.len() < 12 || sv(10) <= 1e-8 * sv(0) {
        return Err(PnpError::DegenerateConfiguration);
    }
    let h = v_t.row(order[11]);
    let pn = Matrix3x4::from_fn(|r, c| h[4 * r + c]);

    let t2 = Matrix3::new(s2, 0.0, -s2 * m2.x, 0.0, s2, -s2 * m2.y, 0.0, 0.0, 1.0);
    let mut t3 = Matrix4::identity() * s3;
    t3[(3, 3)] = 1.0;
    t3.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-m3 * s3));
    let t2_inv = t2.try_inverse().ok_or(PnpError::DegenerateConfiguration)?;
    let mut pm = t2_inv * pn * t3;

    let m = pm.fixed_view::<3, 3>(0, 0).into_owned();
    if m.determinant() < 0.0 {
        pm = -pm;
    }
    let m = pm.fixed_view::<3, 3>(0, 0).into_owned();
    let msvd = m.svd(false, false);
    let scale = msvd.singular_values.sum() / 3.0;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(PnpError::DegenerateConfiguration);
    }
    Ok(Pose {
        rotation: project_to_so3(&m),
        translation: pm.column(3) / scale,
    })
}

/// Direct linear transform on normalized image rays, rotation projected to
/// SO(3). Needs at least 6 correspondences in general position.
pub fn pnp_linear(
    c: &CorrespondenceSet,
    ki: &KeypointSet2D,
    p: &KeypointSet3D,
    k: &CameraIntrinsics,
) -> Result<Pose, PnpError> {
    let (pixels, points) = gather(c, ki, p)?;
    dlt(&pixels, &points, k)
}

fn reprojection_linearization(pixels: &[Pixel], points: &[Point3], pose: &Pose, xi: &Twist, k: &CameraIntrinsics) -> Result<Linearization, PnpError> {
    let mut lin = Linearization {
        cost: 0.0,
        gradient: Vector6::zeros(),
        jtj: nalgebra::Matrix6::zeros(),
    };
    for (q, p) in pixels.iter().zip(points) {
        let (x, dx) = transformed_point_jacobian(xi, pose, p);
        let proj = k
            .project_camera_point(&x, DEFAULT_Z_MIN)
            .map_err(|_| PnpError::PointBehindCamera)?;
        let a = k.projection_jacobian(&x) * dx;
        let r: Vector2<f64> = proj - q;
        lin.cost += r.norm_squared();
        lin.gradient += a.transpose() * r * 2.0;
        lin.jtj += a.transpose() * a * 2.0;
    }
    Ok(lin)
}

fn reprojection_cost(pixels: &[Pixel], points: &[Point3], pose: &Pose, k: &CameraIntrinsics) -> Option<f64> {
    pixels
        .iter()
        .zip(points)
        .map(|(q, p)| k.project_camera_point(&pose.transform(p), DEFAULT_Z_MIN).ok().map(|pr| (q - pr).norm_squared()))
        .sum()
}

/// Sum of squared reprojection errors at `exp(xi) ∘ base` and its gradient in `xi`.
pub fn pnp_cost_gradient(
    xi: &Twist,
    base: &Pose,
    c: &CorrespondenceSet,
    ki: &KeypointSet2D,
    p: &KeypointSet3D,
    k: &CameraIntrinsics,
) -> Result<(f64, Vector6<f64>), PnpError> {
    let (pixels, points) = gather(c, ki, p)?;
    let lin = reprojection_linearization(&pixels, &points, base, xi, k)?;
    Ok((lin.cost, lin.gradient))
}

fn refine(pixels: &[Pixel], points: &[Point3], init: &Pose, k: &CameraIntrinsics, cfg: &SolverConfig) -> Result<SolveResult, PnpError> {
    minimize(
        init,
        cfg,
        |pose| reprojection_linearization(pixels, points, pose, &Twist::zero(), k),
        |pose| reprojection_cost(pixels, points, pose, k),
        PnpError::Divergence,
    )
}

/// Damped Gauss-Newton on the summed squared reprojection error.
pub fn pnp_refine(
    init: &Pose,
    c: &CorrespondenceSet,
    ki: &KeypointSet2D,
    p: &KeypointSet3D,
    k: &CameraIntrinsics,
    cfg: &SolverConfig,
) -> Result<SolveResult, PnpError> {
    cfg.validate().map_err(|e| PnpError::InvalidConfig(e.to_string()))?;
    let (pixels, points) = gather(c, ki, p)?;
    if pixels.is_empty() {
        return Err(PnpError::TooFewPoints { needed: 1, got: 0 });
    }
    refine(&pixels, &points, init, k, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub iteration: usize,
    /// `None` when the minimal solve failed.
    pub inliers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RansacResult {
    pub pose: Pose,
    /// Parallel to the correspondence set; computed under `pose`.
    pub inlier_mask: Vec<bool>,
    pub inlier_count: usize,
    /// Every evaluated hypothesis in sampling order.
    pub hypotheses: Vec<Hypothesis>,
}

fn inlier_mask(pixels: &[Pixel], points: &[Point3], pose: &Pose, k: &CameraIntrinsics, threshold: f64) -> Vec<bool> {
    pixels
        .iter()
        .zip(points)
        .map(|(q, p)| {
            k.project_camera_point(&pose.transform(p), DEFAULT_Z_MIN)
                .map(|pr| (q - pr).norm_squared() <= threshold)
                .unwrap_or(false)
        })
        .collect()
}

fn masked<T: Copy>(xs: &[T], mask: &[bool]) -> Vec<T> {
    xs.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| *x).collect()
}

/// Iterations needed to draw one all-inlier sample with the given confidence:
/// `log(1 - confidence) / log(1 - w^s)` for inlier ratio `w`.
pub fn adaptive_iterations(inlier_ratio: f64, sample_size: usize, confidence: f64) -> f64 {
    if confidence >= 1.0 {
        return f64::INFINITY;
    }
    let all_in = inlier_ratio.powi(sample_size as i32);
    if all_in <= 0.0 {
        return f64::INFINITY;
    }
    if all_in >= 1.0 {
        return 1.0;
    }
    ((1.0 - confidence).ln() / (1.0 - all_in).ln()).ceil()
}

/// Each iteration draws its sample from its own ChaCha stream keyed by
/// `(seed, iteration)`, so batches evaluated in parallel match a serial run.
fn sample_indices(seed: u64, iteration: usize, n: usize, s: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rand::seq::index::sample(&mut rng, n, s).into_vec()
}

const BATCH: usize = 64;

pub fn pnp_ransac(
    c: &CorrespondenceSet,
    ki: &KeypointSet2D,
    p: &KeypointSet3D,
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
    refine_cfg: &SolverConfig,
) -> Result<RansacResult, PnpError> {
    cfg.validate()?;
    let (pixels, points) = gather(c, ki, p)?;
    let n = pixels.len();
    if n < cfg.sample_size {
        return Err(PnpError::TooFewPoints { needed: cfg.sample_size, got: n });
    }

    let polish = SolverConfig { max_iters: 10, ..*refine_cfg };
    let evaluate = |it: usize| -> Option<(Pose, usize)> {
        let idx = sample_indices(cfg.seed, it, n, cfg.sample_size);
        let sp: Vec<Pixel> = idx.iter().map(|&i| pixels[i]).collect();
        let sx: Vec<Point3> = idx.iter().map(|&i| points[i]).collect();
        let linear = dlt(&sp, &sx, k).ok()?;
        // The projective fit is not rigid under noise; polish it on the sample.
        let pose = refine(&sp, &sx, &linear, k, &polish).map_or(linear, |r| r.pose);
        let count = inlier_mask(&pixels, &points, &pose, k, cfg.threshold).iter().filter(|&&b| b).count();
        Some((pose, count))
    };

    let mut hypotheses = Vec::new();
    let mut best: Option<(Pose, usize)> = None;
    let mut limit = cfg.iterations as f64;
    let mut it = 0;
    while (it as f64) < limit.min(cfg.iterations as f64) {
        let end = (it + BATCH).min(cfg.iterations);
        let batch: Vec<Option<(Pose, usize)>> = (it..end).into_par_iter().map(evaluate).collect();
        for res in batch {
            if (it as f64) >= limit {
                break;
            }
            hypotheses.push(Hypothesis {
                iteration: it,
                inliers: res.map(|r| r.1),
            });
            if let Some((pose, count)) = res {
                if best.is_none_or(|b| count > b.1) {
                    best = Some((pose, count));
                    limit = adaptive_iterations(count as f64 / n as f64, cfg.sample_size, cfg.confidence);
                }
            }
            it += 1;
        }
    }

    let (mut pose, mut count) = match best {
        Some(b) if b.1 >= cfg.sample_size => b,
        other => return Err(PnpError::NoConsensus { best: other.map_or(0, |b| b.1) }),
    };
    let mut mask = inlier_mask(&pixels, &points, &pose, k, cfg.threshold);
    // Refit on the consensus set; keep the refit only while it does not lose inliers.
    for _ in 0..3 {
        let Ok(refit) = refine(&masked(&pixels, &mask), &masked(&points, &mask), &pose, k, refine_cfg) else {
            break;
        };
        let new_mask = inlier_mask(&pixels, &points, &refit.pose, k, cfg.threshold);
        let new_count = new_mask.iter().filter(|&&b| b).count();
        if new_count < count {
            break;
        }
        let grew = new_count > count;
        pose = refit.pose;
        count = new_count;
        mask = new_mask;
        if !grew {
            break;
        }
    }
    Ok(RansacResult {
        pose,
        inlier_mask: mask,
        inlier_count: count,
        hypotheses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chamfer::SolverConfig;
    use crate::geometry::reprojection_error;
    use crate::synth::{generate_scene, perturb_pose, NoiseSpec, SceneConfig};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn scene(seed: u64, n: usize) -> crate::synth::ScenePair {
        let cfg = SceneConfig { n_points: n, feature_dim: 4, ..Default::default() };
        generate_scene(&cfg, &NoiseSpec::noiseless(seed)).unwrap()
    }

    fn max_reproj(s: &crate::synth::ScenePair, pose: &Pose) -> f64 {
        s.gt_pairs
            .iter()
            .map(|c| reprojection_error(&s.pixels.pixels()[c.i], &s.cloud.points()[c.j], pose, &s.k).unwrap().sqrt())
            .fold(0.0, f64::max)
    }

    #[test]
    fn linear_recovers_noiseless_pose() {
        for seed in 0..20 {
            let s = scene(seed, 6 + seed as usize * 5);
            let pose = pnp_linear(&s.gt_pairs, &s.pixels, &s.cloud, &s.k).unwrap();
            assert!(max_reproj(&s, &pose) <= 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn linear_errors() {
        let s = scene(1, 20);
        let five = CorrespondenceSet::new(s.gt_pairs.pairs[..5].to_vec());
        assert_eq!(
            pnp_linear(&five, &s.pixels, &s.cloud, &s.k).unwrap_err(),
            PnpError::TooFewPoints { needed: 6, got: 5 }
        );
        let k = CameraIntrinsics::new(585.0, 585.0, 320.0, 240.0).unwrap();
        let pts: Vec<Point3> = (0..10).map(|i| Point3::new(0.1 * i as f64, 0.05 * i as f64, 4.0 + 0.2 * i as f64)).collect();
        let px: Vec<Pixel> = pts.iter().map(|p| k.project_camera_point(&p.coords, 1e-6).unwrap()).collect();
        let ki = KeypointSet2D::from_pixels(px).unwrap();
        let p = KeypointSet3D::from_points(pts).unwrap();
        let c = CorrespondenceSet::from_index_pairs((0..10).map(|i| (i, i)));
        assert_eq!(pnp_linear(&c, &ki, &p, &k).unwrap_err(), PnpError::DegenerateConfiguration);
    }

    #[test]
    fn refine_keeps_exact_pose() {
        let s = scene(2, 50);
        let r = pnp_refine(&s.t_gt, &s.gt_pairs, &s.pixels, &s.cloud, &s.k, &SolverConfig::default()).unwrap();
        assert!((r.pose.rotation - s.t_gt.rotation).abs().max() <= 1e-10);
        assert!((r.pose.translation - s.t_gt.translation).abs().max() <= 1e-10);
    }

    #[test]
    fn refine_with_pixel_noise() {
        let sigma = 0.5;
        for seed in 0..50u64 {
            let cfg = SceneConfig { n_points: 100, feature_dim: 4, ..Default::default() };
            let noise = NoiseSpec { pixel_noise_sigma: sigma, ..NoiseSpec::noiseless(seed) };
            let s = generate_scene(&cfg, &noise).unwrap();
            let init = perturb_pose(&s.t_gt, 2.0, 0.05, seed + 7);
            let r = pnp_refine(&init, &s.gt_pairs, &s.pixels, &s.cloud, &s.k, &SolverConfig::default()).unwrap();
            assert!(r.trace.windows(2).all(|w| w[1].cost <= w[0].cost));
            let rms = (r.cost / s.gt_pairs.len() as f64).sqrt();
            assert!(rms <= 2.0 * sigma, "seed {seed} rms {rms}");
        }
    }

    #[test]
    fn cost_gradient_matches_finite_differences() {
        let s = scene(3, 30);
        let base = perturb_pose(&s.t_gt, 3.0, 0.1, 9);
        let xi = Twist::new(Vector3::new(0.01, -0.02, 0.005), Vector3::new(0.03, 0.0, -0.01));
        let (_, g) = pnp_cost_gradient(&xi, &base, &s.gt_pairs, &s.pixels, &s.cloud, &s.k).unwrap();
        let h = 1e-6;
        for d in 0..6 {
            let mut e = Vector6::zeros();
            e[d] = h;
            let f = |x: Vector6<f64>| {
                pnp_cost_gradient(&Twist::from_vector(&x), &base, &s.gt_pairs, &s.pixels, &s.cloud, &s.k).unwrap().0
            };
            let x0 = xi.to_vector();
            let fd = (f(x0 + e) - f(x0 - e)) / (2.0 * h);
            assert!((fd - g[d]).abs() <= 1e-5 * g[d].abs().max(1.0), "dim {d}: {fd} vs {}", g[d]);
        }
    }

    #[test]
    fn adaptive_bound() {
        assert_eq!(adaptive_iterations(1.0, 6, 0.99), 1.0);
        assert_eq!(adaptive_iterations(0.0, 6, 0.99), f64::INFINITY);
        let expected = ((0.01f64).ln() / (1.0 - 0.5f64.powi(6)).ln()).ceil();
        assert_eq!(adaptive_iterations(0.5, 6, 0.99), expected);
        assert_eq!(adaptive_iterations(0.5, 6, 1.0), f64::INFINITY);
    }

    fn with_outliers(seed: u64, n: usize, rate: f64) -> (crate::synth::ScenePair, KeypointSet2D, Vec<bool>) {
        let s = scene(seed, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let mut pixels = s.pixels.pixels().to_vec();
        let n_out = (rate * n as f64) as usize;
        let mut is_out = vec![false; pixels.len()];
        for idx in rand::seq::index::sample(&mut rng, pixels.len(), n_out) {
            pixels[idx] = Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            is_out[idx] = true;
        }
        (s, KeypointSet2D::from_pixels(pixels).unwrap(), is_out)
    }

    #[test]
    fn ransac_without_outliers() {
        let s = scene(4, 60);
        let cfg = RansacConfig::new(100, 5.0, 1);
        let r = pnp_ransac(&s.gt_pairs, &s.pixels, &s.cloud, &s.k, &cfg, &SolverConfig::default()).unwrap();
        assert!(r.inlier_mask.iter().all(|&b| b));
        let refined = pnp_refine(&r.pose, &s.gt_pairs, &s.pixels, &s.cloud, &s.k, &SolverConfig::default()).unwrap();
        assert!(r.pose.rotation_error_deg(&refined.pose) < 1e-6);
        assert!(max_reproj(&s, &r.pose) < 1e-6);
    }

    #[test]
    fn ransac_properties_with_outliers() {
        let noise = Normal::new(0.0, 0.5).unwrap();
        for seed in 0..5u64 {
            let (s, ki, _) = with_outliers(seed, 120, 0.4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let jittered: Vec<Pixel> = ki
                .pixels()
                .iter()
                .map(|q| Pixel::new(q.x + noise.sample(&mut rng), q.y + noise.sample(&mut rng)))
                .collect();
            let ki = KeypointSet2D::from_pixels(jittered).unwrap();
            let cfg = RansacConfig { confidence: 1.0, ..RansacConfig::new(200, 5.0, seed) };
            let r = pnp_ransac(&s.gt_pairs, &ki, &s.cloud, &s.k, &cfg, &SolverConfig::default()).unwrap();
            assert_eq!(r.hypotheses.len(), 200);
            let best_hyp = r.hypotheses.iter().filter_map(|h| h.inliers).max().unwrap();
            assert!(r.inlier_count >= best_hyp);
            for (c, &m) in s.gt_pairs.iter().zip(&r.inlier_mask) {
                let e = reprojection_error(&ki.pixels()[c.i], &s.cloud.points()[c.j], &r.pose, &s.k).unwrap_or(f64::INFINITY);
                assert_eq!(m, e <= cfg.threshold);
            }
            assert_eq!(r.inlier_count, r.inlier_mask.iter().filter(|&&b| b).count());
        }
    }

    #[test]
    fn ransac_is_deterministic_and_batch_independent() {
        let (s, ki, _) = with_outliers(5, 100, 0.5);
        let cfg = RansacConfig::new(300, 5.0, 42);
        let a = pnp_ransac(&s.gt_pairs, &ki, &s.cloud, &s.k, &cfg, &SolverConfig::default()).unwrap();
        let b = pnp_ransac(&s.gt_pairs, &ki, &s.cloud, &s.k, &cfg, &SolverConfig::default()).unwrap();
        assert_eq!(a, b);
        // The sample drawn at an iteration depends only on (seed, iteration).
        assert_eq!(sample_indices(42, 17, 100, 6), sample_indices(42, 17, 100, 6));
        assert_ne!(sample_indices(42, 17, 100, 6), sample_indices(42, 18, 100, 6));
    }

    #[test]
    fn ransac_errors() {
        let s = scene(6, 5);
        let cfg = RansacConfig::new(10, 5.0, 0);
        assert!(matches!(
            pnp_ransac(&s.gt_pairs, &s.pixels, &s.cloud, &s.k, &cfg, &SolverConfig::default()),
            Err(PnpError::TooFewPoints { .. })
        ));
        assert!(RansacConfig { threshold: 0.0, ..cfg }.validate().is_err());
        assert!(RansacConfig { iterations: 0, ..cfg }.validate().is_err());

        let (s, _, _) = with_outliers(7, 30, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let garbage: Vec<Pixel> = (0..30).map(|_| Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0))).collect();
        let ki = KeypointSet2D::from_pixels(garbage).unwrap();
        let cfg = RansacConfig { threshold: 1e-6, confidence: 1.0, ..RansacConfig::new(50, 1.0, 3) };
        assert!(matches!(
            pnp_ransac(&s.gt_pairs, &ki, &s.cloud, &s.k, &cfg, &SolverConfig::default()),
            Err(PnpError::NoConsensus { .. })
        ));
    }
}
