//! Inlier ratio and registration recall, plus the batch evaluation pipeline.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chamfer::{solve_pose_chamfer, SolverConfig};
use crate::features::{match_nearest, CorrespondenceSet, FeatureError, KeypointSet3D, MatchConfig};
use crate::geometry::Pose;
use crate::io::{list_scene_dirs, read_scene, IoError};
use crate::keypoint::{select_3d_keypoints, SelectConfig};
use crate::pnp::{pnp_ransac, RansacConfig};
use crate::synth::{generate_scene, perturb_pose, NoiseSpec, SceneConfig, ScenePair};

pub const RECORD_SCHEMA: u32 = 1;
pub const DEFAULT_IR_THRESHOLD_M: f64 = 0.05;
pub const DEFAULT_RR_THRESHOLD_M: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("pixel {0} has no depth")]
    MissingDepth(usize),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("invalid metric config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub ir_threshold_m: f64,
    pub rr_threshold_m: f64,
    /// Gate success on whole-cloud RMSE; otherwise on translation error.
    pub rr_uses_rmse: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            ir_threshold_m: DEFAULT_IR_THRESHOLD_M,
            rr_threshold_m: DEFAULT_RR_THRESHOLD_M,
            rr_uses_rmse: true,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.ir_threshold_m > 0.0 && self.rr_threshold_m > 0.0) {
            return Err(EvalError::InvalidConfig("thresholds must be > 0".into()));
        }
        Ok(())
    }
}

/// Fraction of pairs whose pixel, lifted to 3D with its depth and mapped
/// into the cloud frame by `T_gt⁻¹`, lies within `ir_threshold_m` of the
/// matched point. An empty set has ratio 0.
pub fn inlier_ratio(c: &CorrespondenceSet, scene: &ScenePair, cfg: &MetricConfig) -> Result<f64, EvalError> {
    c.validate(scene.pixels.len(), scene.cloud.len())?;
    if c.is_empty() {
        return Ok(0.0);
    }
    let to_cloud = scene.t_gt.inverse();
    let mut hits = 0usize;
    for pair in c.iter() {
        let z = scene.depth[pair.i].ok_or(EvalError::MissingDepth(pair.i))?;
        let cam = scene.k.back_project(&scene.pixels.pixels()[pair.i], z);
        let lifted = to_cloud.transform(&cam.into());
        if (lifted - scene.cloud.points()[pair.j].coords).norm() <= cfg.ir_threshold_m {
            hits += 1;
        }
    }
    Ok(hits as f64 / c.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    pub rmse_m: f64,
    pub success: bool,
}

/// RMSE of `|T_est p - T_gt p|` over the whole cloud.
pub fn registration_success(t_est: &Pose, scene: &ScenePair, cfg: &MetricConfig) -> Registration {
    let pts = scene.cloud.points();
    let sq: f64 = pts
        .iter()
        .map(|p| (t_est.transform(p) - scene.t_gt.transform(p)).norm_squared())
        .sum();
    let rmse_m = if pts.is_empty() { 0.0 } else { (sq / pts.len() as f64).sqrt() };
    let gated = if cfg.rr_uses_rmse {
        rmse_m
    } else {
        t_est.translation_error(&scene.t_gt)
    };
    Registration {
        rmse_m,
        success: gated <= cfg.rr_threshold_m,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ransac,
    Chamfer,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ransac => "ransac",
            Method::Chamfer => "chamfer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub ransac: bool,
    pub chamfer: bool,
    pub matching: MatchConfig,
    /// Keypoint filter for the Chamfer solve; `None` uses the whole cloud.
    pub select: Option<SelectConfig>,
    pub ransac_cfg: RansacConfig,
    pub solver: SolverConfig,
    pub metric: MetricConfig,
    /// Chamfer initialization: ground truth perturbed by this much.
    pub init_rot_deg: f64,
    pub init_trans_m: f64,
    pub record_timings: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            ransac: true,
            chamfer: true,
            matching: MatchConfig::default(),
            select: Some(SelectConfig::default()),
            ransac_cfg: RansacConfig::new(1000, crate::blindpnp::DEFAULT_TAU, 0),
            solver: SolverConfig::default(),
            metric: MetricConfig::default(),
            init_rot_deg: 5.0,
            init_trans_m: 0.1,
            record_timings: false,
        }
    }
}

impl PipelineConfig {
    fn methods(&self) -> Vec<Method> {
        let mut m = Vec::new();
        if self.ransac {
            m.push(Method::Ransac);
        }
        if self.chamfer {
            m.push(Method::Chamfer);
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub match_ms: f64,
    pub solve_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub schema: u32,
    pub scene: String,
    pub method: Method,
    pub n_matches: Option<usize>,
    pub ir: Option<f64>,
    pub rot_err_deg: Option<f64>,
    pub trans_err_m: Option<f64>,
    pub rmse_m: Option<f64>,
    pub rr_success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvalRecord {
    fn failed(scene: &str, method: Method, error: String) -> Self {
        Self {
            schema: RECORD_SCHEMA,
            scene: scene.to_string(),
            method,
            n_matches: None,
            ir: None,
            rot_err_deg: None,
            trans_err_m: None,
            rmse_m: None,
            rr_success: false,
            timings: None,
            error: Some(error),
        }
    }
}

/// A scene that could not be loaded, reported as an errored record.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFailure {
    pub id: String,
    pub message: String,
}

pub type SceneInput = Result<ScenePair, SceneFailure>;

/// Loads every scene directory under `root`; unreadable scenes become failures.
pub fn load_scene_inputs(root: &Path) -> Result<Vec<SceneInput>, IoError> {
    Ok(list_scene_dirs(root)?
        .into_iter()
        .map(|dir| {
            read_scene(&dir).map_err(|e| SceneFailure {
                id: dir.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
                message: e.to_string(),
            })
        })
        .collect())
}

/// Generates one scene per seed, in parallel.
pub fn synth_scene_inputs(seeds: &[u64], cfg: &SceneConfig, noise: &NoiseSpec) -> Vec<SceneInput> {
    seeds
        .par_iter()
        .map(|&seed| {
            generate_scene(cfg, &NoiseSpec { seed, ..*noise }).map_err(|e| SceneFailure {
                id: format!("scene_{seed:06}"),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Seed for the Chamfer initialization of a scene.
fn init_seed(scene: &ScenePair) -> u64 {
    scene.meta.noise.seed.wrapping_add(1000)
}

fn evaluate_scene(scene: &ScenePair, cfg: &PipelineConfig) -> Vec<EvalRecord> {
    let id = scene.id();
    let methods = cfg.methods();
    let t0 = Instant::now();
    let matched = match_nearest(&scene.pixels, &scene.cloud, &cfg.matching)
        .map_err(EvalError::from)
        .and_then(|c| inlier_ratio(&c, scene, &cfg.metric).map(|ir| (c, ir)));
    let match_ms = t0.elapsed().as_secs_f64() * 1e3;
    let (corr, ir) = match matched {
        Ok(x) => x,
        Err(e) => return methods.iter().map(|&m| EvalRecord::failed(id, m, e.to_string())).collect(),
    };

    methods
        .into_iter()
        .map(|method| {
            let t1 = Instant::now();
            let solved: Result<Pose, String> = match method {
                Method::Ransac => pnp_ransac(&corr, &scene.pixels, &scene.cloud, &scene.k, &cfg.ransac_cfg, &cfg.solver)
                    .map(|r| r.pose)
                    .map_err(|e| e.to_string()),
                Method::Chamfer => chamfer_pose(scene, cfg),
            };
            let solve_ms = t1.elapsed().as_secs_f64() * 1e3;
            match solved {
                Ok(pose) => {
                    let reg = registration_success(&pose, scene, &cfg.metric);
                    EvalRecord {
                        schema: RECORD_SCHEMA,
                        scene: id.to_string(),
                        method,
                        n_matches: Some(corr.len()),
                        ir: Some(ir),
                        rot_err_deg: Some(pose.rotation_error_deg(&scene.t_gt)),
                        trans_err_m: Some(pose.translation_error(&scene.t_gt)),
                        rmse_m: Some(reg.rmse_m),
                        rr_success: reg.success,
                        timings: cfg.record_timings.then_some(Timings { match_ms, solve_ms }),
                        error: None,
                    }
                }
                Err(e) => EvalRecord::failed(id, method, e),
            }
        })
        .collect()
}

fn chamfer_pose(scene: &ScenePair, cfg: &PipelineConfig) -> Result<Pose, String> {
    let kp: KeypointSet3D = match (&cfg.select, scene.cloud.features()) {
        (Some(sel), Some(_)) => {
            let s = select_3d_keypoints(&scene.pixels, &scene.cloud, sel, &cfg.matching).map_err(|e| e.to_string())?;
            if s.is_empty() {
                return Err("no 3D keypoint passed the confidence filter".into());
            }
            s.points
        }
        _ => scene.cloud.clone(),
    };
    let init = perturb_pose(&scene.t_gt, cfg.init_rot_deg, cfg.init_trans_m, init_seed(scene));
    solve_pose_chamfer(&init, &scene.pixels, &kp, &scene.k, &cfg.solver)
        .map(|r| r.pose)
        .map_err(|e| e.to_string())
}

/// Evaluates every scene (in parallel) and returns records sorted by
/// scene id, then method.
pub fn run_pipeline(inputs: &[SceneInput], cfg: &PipelineConfig) -> Vec<EvalRecord> {
    let mut records: Vec<EvalRecord> = inputs
        .par_iter()
        .flat_map_iter(|input| match input {
            Ok(scene) => evaluate_scene(scene, cfg),
            Err(f) => cfg
                .methods()
                .into_iter()
                .map(|m| EvalRecord::failed(&f.id, m, f.message.clone()))
                .collect(),
        })
        .collect();
    records.sort_by(|a, b| (&a.scene, a.method).cmp(&(&b.scene, b.method)));
    records
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub scenes: usize,
    pub errors: usize,
    /// Mean over records that report an IR; `None` if none do.
    pub mean_ir: Option<f64>,
    /// Successes over all records of the method, errored ones counted as failures.
    pub rr: Option<f64>,
}

pub fn summarize(records: &[EvalRecord]) -> Vec<MethodSummary> {
    let mut methods: Vec<Method> = records.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    methods
        .into_iter()
        .map(|method| {
            let rs: Vec<&EvalRecord> = records.iter().filter(|r| r.method == method).collect();
            let irs: Vec<f64> = rs.iter().filter_map(|r| r.ir).collect();
            MethodSummary {
                method,
                scenes: rs.len(),
                errors: rs.iter().filter(|r| r.error.is_some()).count(),
                mean_ir: (!irs.is_empty()).then(|| irs.iter().sum::<f64>() / irs.len() as f64),
                rr: (!rs.is_empty()).then(|| rs.iter().filter(|r| r.rr_success).count() as f64 / rs.len() as f64),
            }
        })
        .collect()
}

pub fn summary_markdown(summary: &[MethodSummary]) -> String {
    let fmt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    let mut out = String::from("| method | scenes | errors | mean IR | RR |\n|---|---|---|---|---|\n");
    for s in summary {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            s.method.name(),
            s.scenes,
            s.errors,
            fmt(s.mean_ir),
            fmt(s.rr)
        ));
    }
    out
}
