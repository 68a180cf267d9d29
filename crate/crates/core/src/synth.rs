//! Deterministic synthetic scene pairs.
//!
//! Points are sampled inside the camera frustum at depths in `[d_min, d_max]`,
//! then mapped to the cloud frame through the inverse ground-truth pose. Every
//! cloud point `j` starts with one pixel, the exact projection of `j`. Dropout
//! removes pixels, outliers replace pixel positions (and their features) with
//! uniform in-image samples, and the remaining pixels receive Gaussian noise.

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{CorrespondenceSet, FeatureError, FeatureVector, KeypointSet2D, KeypointSet3D};
use crate::geometry::{so3_exp, CameraIntrinsics, Pixel, Point3, Pose, DEFAULT_Z_MIN};

pub const DEFAULT_D_MAX: f64 = 10.0;
pub const DEFAULT_D_MIN: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoseSpec {
    Identity,
    Fixed { pose: Pose },
    /// Random axis, rotation angle uniform in `[0, max_rot_deg]`, translation
    /// uniform in the ball of radius `max_trans_m`.
    Random { max_rot_deg: f64, max_trans_m: f64 },
}

impl Default for PoseSpec {
    fn default() -> Self {
        PoseSpec::Random {
            max_rot_deg: 30.0,
            max_trans_m: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub pixel_noise_sigma: f64,
    pub feature_noise_sigma: f64,
    pub outlier_rate: f64,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn noiseless(seed: u64) -> Self {
        Self {
            pixel_noise_sigma: 0.0,
            feature_noise_sigma: 0.0,
            outlier_rate: 0.0,
            dropout_rate: 0.0,
            seed,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let rate_ok = |r: f64| (0.0..1.0).contains(&r);
        if !rate_ok(self.outlier_rate) || !rate_ok(self.dropout_rate) {
            return Err(SynthError::InvalidConfig("rates must lie in [0, 1)".into()));
        }
        if !(self.pixel_noise_sigma >= 0.0 && self.feature_noise_sigma >= 0.0) {
            return Err(SynthError::InvalidConfig("noise sigmas must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_points: usize,
    pub intrinsics: CameraIntrinsics,
    pub width: u32,
    pub height: u32,
    pub d_min: f64,
    pub d_max: f64,
    pub feature_dim: usize,
    pub pose: PoseSpec,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_points: 200,
            intrinsics: CameraIntrinsics {
                fu: 585.0,
                fv: 585.0,
                cu: 320.0,
                cv: 240.0,
            },
            width: 640,
            height: 480,
            d_min: DEFAULT_D_MIN,
            d_max: DEFAULT_D_MAX,
            feature_dim: crate::features::DEFAULT_FEATURE_DIM,
            pose: PoseSpec::default(),
        }
    }
}

/// Generation parameters and bookkeeping, persisted as `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub id: String,
    pub config: SceneConfig,
    pub noise: NoiseSpec,
    /// Pixel indices whose position and feature were replaced by outliers.
    pub outlier_indices: Vec<usize>,
    /// Cloud indices whose pixel was dropped.
    pub dropped_points: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub cloud: KeypointSet3D,
    pub pixels: KeypointSet2D,
    pub t_gt: Pose,
    pub k: CameraIntrinsics,
    /// Camera-frame depth of each pixel's source point.
    pub depth: Vec<Option<f64>>,
    /// Generative pixel-to-point pairing (outlier pixels included).
    pub gt_pairs: CorrespondenceSet,
    pub meta: SceneMeta,
}

impl ScenePair {
    pub fn id(&self) -> &str {
        &self.meta.id
    }

    /// Ground-truth pairs whose pixel was not replaced by an outlier.
    pub fn inlier_gt_pairs(&self) -> CorrespondenceSet {
        let pairs = self
            .gt_pairs
            .iter()
            .filter(|c| self.meta.outlier_indices.binary_search(&c.i).is_err())
            .copied()
            .collect();
        CorrespondenceSet::new(pairs)
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

fn random_pose(rng: &mut ChaCha8Rng, max_rot_deg: f64, max_trans_m: f64) -> Pose {
    let angle = rng.random_range(0.0..=max_rot_deg).to_radians();
    let rotation = so3_exp(&(random_unit(rng) * angle));
    let radius = max_trans_m * rng.random::<f64>().cbrt();
    Pose {
        rotation,
        translation: random_unit(rng) * radius,
    }
}

fn random_feature(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn add_noise(rng: &mut ChaCha8Rng, base: &[f64], sigma: f64) -> FeatureVector {
    if sigma == 0.0 {
        return FeatureVector(base.to_vec());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma checked");
    FeatureVector(base.iter().map(|x| x + normal.sample(rng)).collect())
}

pub fn generate_scene(cfg: &SceneConfig, noise: &NoiseSpec) -> Result<ScenePair, SynthError> {
    generate_scene_with_id(cfg, noise, format!("scene_{:06}", noise.seed))
}

pub fn generate_scene_with_id(
    cfg: &SceneConfig,
    noise: &NoiseSpec,
    id: String,
) -> Result<ScenePair, SynthError> {
    if cfg.n_points < 1 {
        return Err(SynthError::InvalidConfig("n_points must be >= 1".into()));
    }
    if !(cfg.d_min > DEFAULT_Z_MIN && cfg.d_max > cfg.d_min) {
        return Err(SynthError::InvalidConfig("need 0 < d_min < d_max".into()));
    }
    if cfg.width == 0 || cfg.height == 0 || cfg.feature_dim == 0 {
        return Err(SynthError::InvalidConfig("image size and feature dim must be positive".into()));
    }
    cfg.intrinsics
        .validate()
        .map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    noise.validate()?;

    let k = cfg.intrinsics;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let t_gt = match cfg.pose {
        PoseSpec::Identity => Pose::identity(),
        PoseSpec::Fixed { pose } => pose,
        PoseSpec::Random { max_rot_deg, max_trans_m } => random_pose(&mut rng, max_rot_deg, max_trans_m),
    };
    let to_cloud = t_gt.inverse();
    let (w, h) = (cfg.width as f64, cfg.height as f64);

    let n = cfg.n_points;
    let mut points = Vec::with_capacity(n);
    let mut depths = Vec::with_capacity(n);
    for _ in 0..n {
        let q = Pixel::new(rng.random_range(0.0..w), rng.random_range(0.0..h));
        let z = rng.random_range(cfg.d_min..=cfg.d_max);
        let cam = k.back_project(&q, z);
        points.push(Point3::from(to_cloud.transform(&Point3::from(cam))));
        depths.push(z);
    }
    let latent: Vec<Vec<f64>> = (0..n).map(|_| random_feature(&mut rng, cfg.feature_dim)).collect();
    let features_3d: Vec<FeatureVector> = latent
        .iter()
        .map(|l| add_noise(&mut rng, l, noise.feature_noise_sigma))
        .collect();

    let n_drop = (noise.dropout_rate * n as f64).floor() as usize;
    let mut dropped_points = sample(&mut rng, n, n_drop).into_vec();
    dropped_points.sort_unstable();
    let kept: Vec<usize> = (0..n).filter(|j| dropped_points.binary_search(j).is_err()).collect();

    let m = kept.len();
    let n_out = (noise.outlier_rate * m as f64).floor() as usize;
    let mut outlier_indices = sample(&mut rng, m, n_out).into_vec();
    outlier_indices.sort_unstable();

    let pixel_noise = (noise.pixel_noise_sigma > 0.0)
        .then(|| Normal::new(0.0, noise.pixel_noise_sigma).expect("sigma checked"));
    let mut pixels = Vec::with_capacity(m);
    let mut features_2d = Vec::with_capacity(m);
    let mut depth = Vec::with_capacity(m);
    for (i, &j) in kept.iter().enumerate() {
        let exact = k
            .project_camera_point(&t_gt.transform(&points[j]), DEFAULT_Z_MIN)
            .expect("frustum sample lies in front of the camera");
        if outlier_indices.binary_search(&i).is_ok() {
            pixels.push(Pixel::new(rng.random_range(0.0..w), rng.random_range(0.0..h)));
            let f = random_feature(&mut rng, cfg.feature_dim);
            features_2d.push(FeatureVector(f));
        } else {
            let q = match &pixel_noise {
                Some(d) => Pixel::new(exact.x + d.sample(&mut rng), exact.y + d.sample(&mut rng)),
                None => exact,
            };
            pixels.push(q);
            features_2d.push(add_noise(&mut rng, &latent[j], noise.feature_noise_sigma));
        }
        depth.push(Some(depths[j]));
    }

    let gt_pairs = CorrespondenceSet::one_to_one(
        kept.iter()
            .enumerate()
            .map(|(i, &j)| crate::features::Correspondence { i, j, score: 0.0 })
            .collect(),
    )?;

    Ok(ScenePair {
        cloud: KeypointSet3D::new(points, Some(features_3d))?,
        pixels: KeypointSet2D::new(pixels, Some(features_2d))?,
        t_gt,
        k,
        depth,
        gt_pairs,
        meta: SceneMeta {
            id,
            config: *cfg,
            noise: *noise,
            outlier_indices,
            dropped_points,
        },
    })
}

/// Rotates by exactly `rot_deg` about a random axis (left-multiplied) and
/// shifts the translation by exactly `trans_m` in a random direction.
pub fn perturb_pose(t: &Pose, rot_deg: f64, trans_m: f64, seed: u64) -> Pose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = random_unit(&mut rng);
    let dir = random_unit(&mut rng);
    Pose {
        rotation: so3_exp(&(axis * rot_deg.to_radians())) * t.rotation,
        translation: t.translation + dir * trans_m,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blindpnp::{kappa, InlierConfig};
    use crate::chamfer::chamfer_cost;
    use crate::geometry::reprojection_error;

    fn small(n: usize) -> SceneConfig {
        SceneConfig { n_points: n, feature_dim: 16, ..Default::default() }
    }

    #[test]
    fn noiseless_scene_is_exact() {
        let s = generate_scene(&small(100), &NoiseSpec::noiseless(3)).unwrap();
        for c in s.gt_pairs.iter() {
            let e = reprojection_error(&s.pixels.pixels()[c.i], &s.cloud.points()[c.j], &s.t_gt, &s.k).unwrap();
            assert_eq!(e, 0.0);
        }
        assert_eq!(chamfer_cost(&s.t_gt, &s.pixels, &s.cloud, &s.k).unwrap().value, 0.0);
        for tau in [1e-9, 1.0, 5.0] {
            let cfg = InlierConfig::new(tau).unwrap();
            assert_eq!(kappa(&s.t_gt, &s.gt_pairs, &s.pixels, &s.cloud, &s.k, &cfg).unwrap(), 100);
        }
        assert!(s.depth.iter().all(|d| matches!(d, Some(z) if *z >= DEFAULT_D_MIN && *z <= DEFAULT_D_MAX)));
        for (q, d) in s.pixels.pixels().iter().zip(&s.depth) {
            assert!(d.unwrap() > 0.0);
            assert!((0.0..640.0).contains(&q.x) || (q.x - 640.0).abs() < 1e-9);
        }
    }

    #[test]
    fn outlier_count_is_exact() {
        let noise = NoiseSpec { outlier_rate: 0.5, ..NoiseSpec::noiseless(1) };
        let s = generate_scene(&small(200), &noise).unwrap();
        assert_eq!(s.meta.outlier_indices.len(), 100);
        let noise = NoiseSpec { outlier_rate: 0.33, dropout_rate: 0.1, ..NoiseSpec::noiseless(2) };
        let s = generate_scene(&small(101), &noise).unwrap();
        assert_eq!(s.meta.dropped_points.len(), 10);
        assert_eq!(s.pixels.len(), 91);
        assert_eq!(s.meta.outlier_indices.len(), 30);
        assert_eq!(s.inlier_gt_pairs().len(), 61);
    }

    #[test]
    fn generation_is_deterministic() {
        let noise = NoiseSpec {
            pixel_noise_sigma: 0.7,
            feature_noise_sigma: 0.2,
            outlier_rate: 0.2,
            dropout_rate: 0.1,
            seed: 42,
        };
        let a = generate_scene(&small(80), &noise).unwrap();
        let b = generate_scene(&small(80), &noise).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&small(80), &NoiseSpec { seed: 43, ..noise }).unwrap();
        assert_ne!(a.t_gt, c.t_gt);
    }

    #[test]
    fn invalid_configs() {
        assert!(generate_scene(&small(0), &NoiseSpec::noiseless(0)).is_err());
        let bad = NoiseSpec { outlier_rate: 1.0, ..NoiseSpec::noiseless(0) };
        assert!(generate_scene(&small(5), &bad).is_err());
    }

    #[test]
    fn perturbation_examples() {
        let t = generate_scene(&small(1), &NoiseSpec::noiseless(9)).unwrap().t_gt;
        assert_eq!(perturb_pose(&t, 0.0, 0.0, 5), t);
        for seed in 0..50 {
            let p = perturb_pose(&t, 5.0, 0.1, seed);
            // Independent angle oracle through the log map.
            let rel = Pose { rotation: p.rotation * t.rotation.transpose(), translation: Vector3::zeros() };
            let angle = crate::geometry::se3_log(&rel).unwrap().omega.norm().to_degrees();
            assert!((angle - 5.0).abs() < 1e-9);
            assert!((p.translation_error(&t) - 0.1).abs() < 1e-12);
        }
        let all: Vec<Pose> = (0..100).map(|s| perturb_pose(&t, 3.0, 0.05, s)).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
    }
}
