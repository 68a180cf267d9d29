//! 2D keypoint sampling and 2D-guided 3D keypoint selection.
//!
//! For each 2D keypoint `q` the nearest 3D feature gives `p*_q` and its
//! distance `s*_q`. A 3D keypoint is kept when `s*_q <= s_th`. The keypoint
//! loss rewards kept keypoints that also reproject within `tau` of `q` under
//! the ground-truth pose.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{nearest_3d_matches, FeatureError, KeypointSet2D, KeypointSet3D, MatchConfig};
use crate::geometry::{CameraIntrinsics, Pixel, Pose, DEFAULT_Z_MIN};

/// `e^{-0.4}`.
pub const DEFAULT_S_TH: f64 = 0.670_320_046_035_639_3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KeypointError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("invalid keypoint config: {0}")]
    InvalidConfig(String),
    #[error("ground truth is empty, recall is undefined")]
    EmptyGroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectConfig {
    /// Feature-distance confidence threshold.
    pub s_th: f64,
    /// Squared-pixel reprojection threshold.
    pub tau: f64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            s_th: DEFAULT_S_TH,
            tau: crate::blindpnp::DEFAULT_TAU,
        }
    }
}

impl SelectConfig {
    pub fn new(s_th: f64, tau: f64) -> Result<Self, KeypointError> {
        if !(s_th > 0.0) || !(tau > 0.0) {
            return Err(KeypointError::InvalidConfig(format!(
                "s_th and tau must be > 0, got s_th={s_th} tau={tau}"
            )));
        }
        Ok(Self { s_th, tau })
    }
}

/// Grid of cell centers at stride `grid_step`, row-major. Cells on the right
/// and bottom borders are clipped to the image before taking their center.
pub fn sample_uniform_2d(width: u32, height: u32, grid_step: u32) -> Result<KeypointSet2D, KeypointError> {
    if grid_step < 1 || width == 0 || height == 0 {
        return Err(KeypointError::InvalidConfig(format!(
            "need positive size and step, got {width}x{height} step {grid_step}"
        )));
    }
    let centers = |extent: u32| -> Vec<f64> {
        (0..extent.div_ceil(grid_step))
            .map(|c| {
                let lo = c * grid_step;
                let hi = (lo + grid_step).min(extent);
                0.5 * (lo + hi) as f64
            })
            .collect()
    };
    let us = centers(width);
    let vs = centers(height);
    let pixels = vs
        .iter()
        .flat_map(|&v| us.iter().map(move |&u| Pixel::new(u, v)))
        .collect();
    Ok(KeypointSet2D::from_pixels(pixels)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectedKeypoint {
    /// Index into the candidate cloud.
    pub point_index: usize,
    /// 2D keypoint that selected the point.
    pub source: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSelection {
    pub points: KeypointSet3D,
    /// Parallel to `points`, ordered by source index.
    pub entries: Vec<SelectedKeypoint>,
}

impl KeypointSelection {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn point_indices(&self) -> BTreeSet<usize> {
        self.entries.iter().map(|e| e.point_index).collect()
    }
}

/// Keeps `p*_q` for every `q` with `s*_q <= s_th`. A point reached from several
/// 2D keypoints is kept once, with the lowest score (then lowest source index).
pub fn select_3d_keypoints(
    ki: &KeypointSet2D,
    p: &KeypointSet3D,
    cfg: &SelectConfig,
    mcfg: &MatchConfig,
) -> Result<KeypointSelection, KeypointError> {
    let nearest = nearest_3d_matches(ki, p, mcfg)?;
    Ok(selection_from_nearest(&nearest, p, cfg.s_th))
}

fn selection_from_nearest(nearest: &[(usize, f64)], p: &KeypointSet3D, s_th: f64) -> KeypointSelection {
    let mut best: BTreeMap<usize, SelectedKeypoint> = BTreeMap::new();
    for (q, &(j, s)) in nearest.iter().enumerate() {
        if s > s_th {
            continue;
        }
        let cand = SelectedKeypoint { point_index: j, source: q, score: s };
        best.entry(j)
            .and_modify(|cur| {
                if s < cur.score {
                    *cur = cand;
                }
            })
            .or_insert(cand);
    }
    let mut entries: Vec<SelectedKeypoint> = best.into_values().collect();
    entries.sort_by_key(|e| e.source);
    let indices: Vec<usize> = entries.iter().map(|e| e.point_index).collect();
    KeypointSelection {
        points: p.select(&indices),
        entries,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyFlags {
    /// `s*_q <= s_th`.
    pub confident: bool,
    /// `p*_q` reprojects within `tau` of `q` under the ground-truth pose.
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyLoss {
    /// Negative count of confident and correct keypoints.
    pub loss: f64,
    pub per_q: Vec<KeyFlags>,
}

fn within(q: &Pixel, p: &crate::geometry::Point3, pose: &Pose, k: &CameraIntrinsics, tau: f64) -> bool {
    k.project_camera_point(&pose.transform(p), DEFAULT_Z_MIN)
        .map(|proj| (q - proj).norm_squared() <= tau)
        .unwrap_or(false)
}

fn key_flags(
    ki: &KeypointSet2D,
    p: &KeypointSet3D,
    t_gt: &Pose,
    k: &CameraIntrinsics,
    cfg: &SelectConfig,
    mcfg: &MatchConfig,
) -> Result<Vec<KeyFlags>, KeypointError> {
    let nearest = nearest_3d_matches(ki, p, mcfg)?;
    Ok(ki
        .pixels()
        .iter()
        .zip(&nearest)
        .map(|(q, &(j, s))| KeyFlags {
            confident: s <= cfg.s_th,
            correct: within(q, &p.points()[j], t_gt, k, cfg.tau),
        })
        .collect())
}

/// Count form of the keypoint loss, in `[-M0, 0]`.
pub fn key_loss(
    ki: &KeypointSet2D,
    p: &KeypointSet3D,
    t_gt: &Pose,
    k: &CameraIntrinsics,
    cfg: &SelectConfig,
    mcfg: &MatchConfig,
) -> Result<KeyLoss, KeypointError> {
    let per_q = key_flags(ki, p, t_gt, k, cfg, mcfg)?;
    let hits = per_q.iter().filter(|f| f.confident && f.correct).count();
    Ok(KeyLoss {
        loss: -(hits as f64),
        per_q,
    })
}

/// `1 - |A ∩ B| / |A ∪ B|` with `A` the confident keypoints and `B` the
/// correct ones; 0 when both are empty.
pub fn key_loss_iou(
    ki: &KeypointSet2D,
    p: &KeypointSet3D,
    t_gt: &Pose,
    k: &CameraIntrinsics,
    cfg: &SelectConfig,
    mcfg: &MatchConfig,
) -> Result<f64, KeypointError> {
    let flags = key_flags(ki, p, t_gt, k, cfg, mcfg)?;
    Ok(iou_loss(&flags))
}

fn iou_loss(flags: &[KeyFlags]) -> f64 {
    let inter = flags.iter().filter(|f| f.confident && f.correct).count();
    let union = flags.iter().filter(|f| f.confident || f.correct).count();
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothKeyLoss {
    /// Temperature of the reprojection indicator, squared pixels.
    pub tau_temperature: f64,
    /// Temperature of the confidence indicator, feature-distance units.
    pub score_temperature: f64,
}

impl Default for SmoothKeyLoss {
    fn default() -> Self {
        Self {
            tau_temperature: 1.0,
            score_temperature: 0.02,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Sigmoid relaxation of [`key_loss`]; tends to the count form as both
/// temperatures go to zero. Points behind the camera contribute nothing.
pub fn key_loss_smooth(
    ki: &KeypointSet2D,
    p: &KeypointSet3D,
    t_gt: &Pose,
    k: &CameraIntrinsics,
    cfg: &SelectConfig,
    mcfg: &MatchConfig,
    smooth: &SmoothKeyLoss,
) -> Result<f64, KeypointError> {
    let nearest = nearest_3d_matches(ki, p, mcfg)?;
    Ok(ki
        .pixels()
        .iter()
        .zip(&nearest)
        .map(|(q, &(j, s))| {
            let Ok(proj) = k.project_camera_point(&t_gt.transform(&p.points()[j]), DEFAULT_Z_MIN) else {
                return 0.0;
            };
            let e = (q - proj).norm_squared();
            -sigmoid((cfg.tau - e) / smooth.tau_temperature) * sigmoid((cfg.s_th - s) / smooth.score_temperature)
        })
        .sum())
}

/// Sum of (unsquared) reprojection errors of nearest-feature matches under
/// `pose`. Diagnostic only; points behind the camera are skipped.
pub fn nearest_feature_reprojection_sum(
    ki: &KeypointSet2D,
    p: &KeypointSet3D,
    pose: &Pose,
    k: &CameraIntrinsics,
    mcfg: &MatchConfig,
) -> Result<f64, KeypointError> {
    let nearest = nearest_3d_matches(ki, p, mcfg)?;
    Ok(ki
        .pixels()
        .iter()
        .zip(&nearest)
        .filter_map(|(q, &(j, _))| {
            k.project_camera_point(&pose.transform(&p.points()[j]), DEFAULT_Z_MIN)
                .ok()
                .map(|proj| (q - proj).norm())
        })
        .sum())
}

/// Upper bound on the squared-pixel threshold: `(rr · max(fu, fv) / d_max)²`.
pub fn tau_criterion(rr_threshold_m: f64, k: &CameraIntrinsics, d_max_m: f64) -> f64 {
    let r = rr_threshold_m * k.max_focal() / d_max_m;
    r * r
}

/// Ground-truth correctness of a `(2D index, 3D index)` selection.
pub trait CorrectnessOracle {
    fn is_correct(&self, q: usize, point: usize) -> bool;
    /// 2D keypoints that have at least one correct 3D partner.
    fn positives(&self) -> BTreeSet<usize>;
}

/// Correct when the point reprojects within `pixel_threshold` pixels of `q`.
pub struct ReprojectionOracle<'a> {
    pub ki: &'a KeypointSet2D,
    pub p: &'a KeypointSet3D,
    pub t_gt: &'a Pose,
    pub k: &'a CameraIntrinsics,
    pub pixel_threshold: f64,
}

impl CorrectnessOracle for ReprojectionOracle<'_> {
    fn is_correct(&self, q: usize, point: usize) -> bool {
        within(
            &self.ki.pixels()[q],
            &self.p.points()[point],
            self.t_gt,
            self.k,
            self.pixel_threshold * self.pixel_threshold,
        )
    }

    fn positives(&self) -> BTreeSet<usize> {
        let projected: Vec<Pixel> = self
            .p
            .points()
            .iter()
            .filter_map(|pt| self.k.project_camera_point(&self.t_gt.transform(pt), DEFAULT_Z_MIN).ok())
            .collect();
        let thr2 = self.pixel_threshold * self.pixel_threshold;
        self.ki
            .pixels()
            .iter()
            .enumerate()
            .filter(|(_, q)| projected.iter().any(|pr| (*q - pr).norm_squared() <= thr2))
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    /// Fraction of selected keypoints that are correct; 0 when nothing is selected.
    pub precision: f64,
    /// Fraction of positive 2D keypoints that select a correct 3D keypoint.
    pub recall: f64,
    pub count: usize,
}

pub fn keypoint_precision_recall(
    selected: &KeypointSelection,
    oracle: &impl CorrectnessOracle,
) -> Result<PrecisionRecall, KeypointError> {
    let positives = oracle.positives();
    if positives.is_empty() {
        return Err(KeypointError::EmptyGroundTruth);
    }
    let correct: Vec<&SelectedKeypoint> = selected
        .entries
        .iter()
        .filter(|e| oracle.is_correct(e.source, e.point_index))
        .collect();
    let precision = if selected.is_empty() {
        0.0
    } else {
        correct.len() as f64 / selected.len() as f64
    };
    let hit = correct.iter().filter(|e| positives.contains(&e.source)).count();
    Ok(PrecisionRecall {
        precision,
        recall: hit as f64 / positives.len() as f64,
        count: selected.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointReport {
    pub selected: KeypointSelection,
    pub precision: f64,
    pub recall: f64,
    pub count: usize,
}

/// Selection plus its precision/recall against reprojection ground truth.
#[allow(clippy::too_many_arguments)]
pub fn keypoint_report(
    ki: &KeypointSet2D,
    p: &KeypointSet3D,
    t_gt: &Pose,
    k: &CameraIntrinsics,
    cfg: &SelectConfig,
    mcfg: &MatchConfig,
    pixel_threshold: f64,
) -> Result<KeypointReport, KeypointError> {
    let selected = select_3d_keypoints(ki, p, cfg, mcfg)?;
    let oracle = ReprojectionOracle { ki, p, t_gt, k, pixel_threshold };
    let pr = keypoint_precision_recall(&selected, &oracle)?;
    Ok(KeypointReport {
        count: selected.len(),
        selected,
        precision: pr.precision,
        recall: pr.recall,
    })
}
