use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use mincd::blindpnp::{kappa_star, InlierConfig, DEFAULT_TAU};
use mincd::chamfer::{chamfer_cost, mincd_objective, solve_pose_chamfer, LossWeights, SolverConfig, DEFAULT_LAMBDA1, DEFAULT_LAMBDA2};
use mincd::eval::{
    inlier_ratio, load_scene_inputs, registration_success, run_pipeline, summarize, summary_markdown, synth_scene_inputs,
    MetricConfig, PipelineConfig,
};
use mincd::features::{match_by_threshold, match_nearest, MatchConfig};
use mincd::harness::{chamfer_grad_trial, inequality_trial, pnp_grad_trial};
use mincd::io::{read_scene, write_correspondences_csv, write_json, write_scene, write_selection, write_trace_csv};
use mincd::keypoint::{key_loss, keypoint_report, select_3d_keypoints, SelectConfig, DEFAULT_S_TH};
use mincd::pnp::{pnp_ransac, RansacConfig};
use mincd::synth::{generate_scene, perturb_pose, NoiseSpec, SceneConfig, ScenePair};

/// Blind-PnP relaxation toolkit: synthetic scenes, matching, Chamfer and
/// RANSAC pose solvers, and IR/RR evaluation.
///
/// Every verb prints deterministic JSON lines on stdout; timings go to stderr.
#[derive(Parser)]
#[command(name = "mincd", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Inlier threshold, squared pixels.
    #[arg(long, global = true, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Feature-distance confidence threshold for 3D keypoints.
    #[arg(long = "s-th", global = true, default_value_t = DEFAULT_S_TH)]
    s_th: f64,
    /// Feature-distance matching threshold.
    #[arg(long, global = true, default_value_t = 0.5)]
    delta: f64,
    #[arg(long, global = true, default_value_t = DEFAULT_LAMBDA1)]
    lambda1: f64,
    #[arg(long, global = true, default_value_t = DEFAULT_LAMBDA2)]
    lambda2: f64,
    /// Output file or directory, depending on the verb.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Copy)]
struct SceneArgs {
    #[arg(long, default_value_t = 200)]
    points: usize,
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0.0)]
    pixel_noise: f64,
    #[arg(long, default_value_t = 0.0)]
    feature_noise: f64,
    #[arg(long, default_value_t = 0.0)]
    outlier_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    dropout_rate: f64,
}

impl SceneArgs {
    fn config(&self) -> SceneConfig {
        SceneConfig { n_points: self.points, feature_dim: self.feature_dim, ..Default::default() }
    }

    fn noise(&self, seed: u64) -> NoiseSpec {
        NoiseSpec {
            pixel_noise_sigma: self.pixel_noise,
            feature_noise_sigma: self.feature_noise,
            outlier_rate: self.outlier_rate,
            dropout_rate: self.dropout_rate,
            seed,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MatchMode {
    Nearest,
    Threshold,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Ransac,
    Chamfer,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scene directories `scene_NNNNNN` under --out, seeds seed..seed+count.
    Synth {
        #[arg(long, default_value_t = 1)]
        count: u64,
        #[command(flatten)]
        scene: SceneArgs,
    },
    /// Match a scene's 2D and 3D features; --out writes the correspondence CSV.
    Match {
        scene: PathBuf,
        #[arg(long, value_enum, default_value = "nearest")]
        mode: MatchMode,
    },
    /// Chamfer pose solve from a perturbed ground truth; --out writes the trace CSV.
    SolveChamfer {
        scene: PathBuf,
        #[arg(long, default_value_t = 5.0)]
        init_rot_deg: f64,
        #[arg(long, default_value_t = 0.1)]
        init_trans_m: f64,
        #[arg(long, default_value_t = 200)]
        max_iters: usize,
        /// Use every cloud point instead of the confidence-filtered keypoints.
        #[arg(long)]
        all_points: bool,
        /// Write the selected keypoints as PLY plus CSV sidecar with this path stem.
        #[arg(long)]
        keypoints_out: Option<PathBuf>,
    },
    /// RANSAC PnP on nearest-feature matches.
    SolvePnp {
        scene: PathBuf,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
    },
    /// Batch evaluation over scene directories or freshly generated scenes.
    Eval {
        /// Directory of scene directories; otherwise --synthetic scenes are generated.
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        synthetic: u64,
        #[arg(long, value_enum, default_value = "both")]
        method: MethodArg,
        #[arg(long, default_value_t = 0.05)]
        ir_threshold: f64,
        #[arg(long, default_value_t = 0.05)]
        rr_threshold: f64,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[command(flatten)]
        scene: SceneArgs,
    },
    /// Finite-difference checks of the Chamfer and reprojection gradients.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        instances: u64,
    },
    /// Check kappa <= kappa_star on random instances.
    BoundCheck {
        #[arg(long, default_value_t = 1000)]
        instances: u64,
    },
    /// Time the main kernels on generated scenes.
    Bench {
        #[arg(long, default_value_t = 3)]
        count: u64,
        #[command(flatten)]
        scene: SceneArgs,
    },
}

type CliResult = Result<ExitCode, String>;

fn emit<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("records serialize"));
}

fn load(path: &Path) -> Result<ScenePair, String> {
    read_scene(path).map_err(|e| e.to_string())
}

fn match_config(g: &Global) -> Result<MatchConfig, String> {
    MatchConfig::new(g.delta, true).map_err(|e| e.to_string())
}

fn select_config(g: &Global) -> Result<SelectConfig, String> {
    SelectConfig::new(g.s_th, g.tau).map_err(|e| e.to_string())
}

fn pose_errors(pose: &mincd::Pose, scene: &ScenePair) -> serde_json::Value {
    let reg = registration_success(pose, scene, &MetricConfig::default());
    json!({
        "rot_err_deg": pose.rotation_error_deg(&scene.t_gt),
        "trans_err_m": pose.translation_error(&scene.t_gt),
        "rmse_m": reg.rmse_m,
        "rr_success": reg.success,
    })
}

fn merge(mut a: serde_json::Value, b: serde_json::Value) -> serde_json::Value {
    if let (Some(a), serde_json::Value::Object(b)) = (a.as_object_mut(), b) {
        a.extend(b);
    }
    a
}

fn synth(g: &Global, count: u64, args: &SceneArgs) -> CliResult {
    let out = g.out.as_ref().ok_or("synth needs --out DIR")?;
    for seed in g.seed..g.seed + count {
        let scene = generate_scene(&args.config(), &args.noise(seed)).map_err(|e| e.to_string())?;
        write_scene(&out.join(scene.id()), &scene).map_err(|e| e.to_string())?;
        emit(&json!({
            "scene": scene.id(),
            "points": scene.cloud.len(),
            "pixels": scene.pixels.len(),
            "outliers": scene.meta.outlier_indices.len(),
            "dropped": scene.meta.dropped_points.len(),
        }));
    }
    Ok(ExitCode::SUCCESS)
}

fn do_match(g: &Global, path: &Path, mode: MatchMode) -> CliResult {
    let scene = load(path)?;
    let cfg = match_config(g)?;
    let c = match mode {
        MatchMode::Nearest => match_nearest(&scene.pixels, &scene.cloud, &cfg),
        MatchMode::Threshold => match_by_threshold(&scene.pixels, &scene.cloud, &cfg),
    }
    .map_err(|e| e.to_string())?;
    let ir = inlier_ratio(&c, &scene, &MetricConfig::default()).map_err(|e| e.to_string())?;
    if let Some(out) = &g.out {
        write_correspondences_csv(out, &c).map_err(|e| e.to_string())?;
    }
    emit(&json!({ "scene": scene.id(), "n_matches": c.len(), "ir": ir }));
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn solve_chamfer(
    g: &Global,
    path: &Path,
    rot: f64,
    trans: f64,
    max_iters: usize,
    all_points: bool,
    keypoints_out: Option<&Path>,
) -> CliResult {
    let scene = load(path)?;
    let mcfg = match_config(g)?;
    let scfg = select_config(g)?;
    let (kp, selected) = if all_points {
        (scene.cloud.clone(), None)
    } else {
        let sel = select_3d_keypoints(&scene.pixels, &scene.cloud, &scfg, &mcfg).map_err(|e| e.to_string())?;
        if sel.is_empty() {
            return Err("no 3D keypoint passed the confidence filter; raise --s-th".into());
        }
        if let Some(stem) = keypoints_out {
            write_selection(&stem.with_extension("ply"), &stem.with_extension("csv"), &sel).map_err(|e| e.to_string())?;
        }
        let report = keypoint_report(&scene.pixels, &scene.cloud, &scene.t_gt, &scene.k, &scfg, &mcfg, 3.0).ok();
        (sel.points.clone(), Some((sel.len(), report.map(|r| (r.precision, r.recall)))))
    };
    let init = perturb_pose(&scene.t_gt, rot, trans, g.seed);
    let cfg = SolverConfig { max_iters, ..Default::default() };
    let result = solve_pose_chamfer(&init, &scene.pixels, &kp, &scene.k, &cfg).map_err(|e| e.to_string())?;
    if let Some(out) = &g.out {
        write_trace_csv(out, &result.trace, Some(&scene.t_gt)).map_err(|e| e.to_string())?;
    }
    let key = key_loss(&scene.pixels, &scene.cloud, &scene.t_gt, &scene.k, &scfg, &mcfg).map_err(|e| e.to_string())?;
    let weights = LossWeights { lambda1: g.lambda1, lambda2: g.lambda2 };
    // No correspondence loss is trained here, so that term is zero.
    let objective = mincd_objective(0.0, key.loss, result.cost, &weights).map_err(|e| e.to_string())?;
    let line = json!({
        "scene": scene.id(),
        "pose": result.pose,
        "cost": result.cost,
        "iterations": result.trace.len() - 1,
        "converged": result.converged,
        "selected": selected.map(|s| s.0),
        "keypoint_precision": selected.and_then(|s| s.1.map(|p| p.0)),
        "keypoint_recall": selected.and_then(|s| s.1.map(|p| p.1)),
        "key_loss": key.loss,
        "objective": objective,
    });
    emit(&merge(line, pose_errors(&result.pose, &scene)));
    Ok(ExitCode::SUCCESS)
}

fn solve_pnp(g: &Global, path: &Path, iterations: usize) -> CliResult {
    let scene = load(path)?;
    let c = match_nearest(&scene.pixels, &scene.cloud, &match_config(g)?).map_err(|e| e.to_string())?;
    let cfg = RansacConfig::new(iterations, g.tau, g.seed);
    let r = pnp_ransac(&c, &scene.pixels, &scene.cloud, &scene.k, &cfg, &SolverConfig::default()).map_err(|e| e.to_string())?;
    if let Some(out) = &g.out {
        write_json(out, &r.pose).map_err(|e| e.to_string())?;
    }
    let line = json!({
        "scene": scene.id(),
        "pose": r.pose,
        "n_matches": c.len(),
        "inliers": r.inlier_count,
        "hypotheses": r.hypotheses.len(),
    });
    emit(&merge(line, pose_errors(&r.pose, &scene)));
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn eval(
    g: &Global,
    scenes: Option<&Path>,
    synthetic: u64,
    method: MethodArg,
    ir_threshold: f64,
    rr_threshold: f64,
    iterations: usize,
    args: &SceneArgs,
) -> CliResult {
    let metric = MetricConfig { ir_threshold_m: ir_threshold, rr_threshold_m: rr_threshold, rr_uses_rmse: true };
    metric.validate().map_err(|e| e.to_string())?;
    let inputs = match scenes {
        Some(dir) => load_scene_inputs(dir).map_err(|e| e.to_string())?,
        None => {
            let seeds: Vec<u64> = (g.seed..g.seed + synthetic).collect();
            synth_scene_inputs(&seeds, &args.config(), &args.noise(0))
        }
    };
    let cfg = PipelineConfig {
        ransac: matches!(method, MethodArg::Ransac | MethodArg::Both),
        chamfer: matches!(method, MethodArg::Chamfer | MethodArg::Both),
        matching: match_config(g)?,
        select: Some(select_config(g)?),
        ransac_cfg: RansacConfig::new(iterations, g.tau, g.seed),
        metric,
        ..Default::default()
    };
    let t0 = Instant::now();
    let records = run_pipeline(&inputs, &cfg);
    eprintln!("eval: {} records in {:.3} s", records.len(), t0.elapsed().as_secs_f64());
    for r in &records {
        emit(r);
    }
    let summary = summarize(&records);
    let markdown = summary_markdown(&summary);
    eprint!("{markdown}");
    if let Some(out) = &g.out {
        std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
        let lines: String = records.iter().map(|r| serde_json::to_string(r).expect("records serialize") + "\n").collect();
        std::fs::write(out.join("records.jsonl"), lines).map_err(|e| e.to_string())?;
        write_json(&out.join("summary.json"), &summary).map_err(|e| e.to_string())?;
        std::fs::write(out.join("summary.md"), &markdown).map_err(|e| e.to_string())?;
    }
    Ok(if records.iter().any(|r| r.error.is_some()) { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn grad_check(g: &Global, instances: u64) -> CliResult {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let c = chamfer_grad_trial(g.seed, i);
        emit(&json!({ "kind": "chamfer", "instance": i, "rel_err": c.rel_err, "grad_norm": c.grad_norm, "attempts": c.attempts }));
        let p = pnp_grad_trial(g.seed, i);
        emit(&json!({ "kind": "reprojection", "instance": i, "rel_err": p.rel_err, "grad_norm": p.grad_norm }));
        worst = worst.max(c.rel_err).max(p.rel_err);
    }
    emit(&json!({ "instances": instances, "max_rel_err": worst }));
    Ok(if worst <= 1e-5 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn bound_check(g: &Global, instances: u64) -> CliResult {
    let mut violations = 0;
    for i in 0..instances {
        let t = inequality_trial(g.seed, i);
        violations += usize::from(!t.holds);
        emit(&t);
    }
    emit(&json!({ "instances": instances, "violations": violations }));
    Ok(if violations == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn bench(g: &Global, count: u64, args: &SceneArgs) -> CliResult {
    let mcfg = match_config(g)?;
    for seed in g.seed..g.seed + count {
        let scene = generate_scene(&args.config(), &args.noise(seed)).map_err(|e| e.to_string())?;
        let init = perturb_pose(&scene.t_gt, 5.0, 0.1, seed);

        let t = Instant::now();
        let cost = chamfer_cost(&init, &scene.pixels, &scene.cloud, &scene.k).map_err(|e| e.to_string())?.value;
        let cost_ms = t.elapsed().as_secs_f64() * 1e3;

        let t = Instant::now();
        let ks = kappa_star(&scene.t_gt, &scene.pixels, &scene.cloud, &scene.k, &InlierConfig { tau: g.tau });
        let ks_ms = t.elapsed().as_secs_f64() * 1e3;

        let t = Instant::now();
        let c = match_nearest(&scene.pixels, &scene.cloud, &mcfg).map_err(|e| e.to_string())?;
        let match_ms = t.elapsed().as_secs_f64() * 1e3;

        let t = Instant::now();
        let solved = solve_pose_chamfer(&init, &scene.pixels, &scene.cloud, &scene.k, &SolverConfig::default())
            .map_err(|e| e.to_string())?;
        let solve_ms = t.elapsed().as_secs_f64() * 1e3;

        let t = Instant::now();
        let ransac = pnp_ransac(&c, &scene.pixels, &scene.cloud, &scene.k, &RansacConfig::new(1000, g.tau, seed), &SolverConfig::default())
            .map_err(|e| e.to_string())?;
        let ransac_ms = t.elapsed().as_secs_f64() * 1e3;

        eprintln!(
            "{}: chamfer_cost {cost_ms:.3} ms, kappa_star {ks_ms:.3} ms, match {match_ms:.3} ms, chamfer_solve {solve_ms:.3} ms, ransac {ransac_ms:.3} ms",
            scene.id()
        );
        emit(&json!({
            "scene": scene.id(),
            "points": scene.cloud.len(),
            "chamfer_cost": cost,
            "kappa_star": ks,
            "n_matches": c.len(),
            "chamfer_iterations": solved.trace.len() - 1,
            "chamfer_final_cost": solved.cost,
            "ransac_inliers": ransac.inlier_count,
            "ransac_hypotheses": ransac.hypotheses.len(),
        }));
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> CliResult {
    let g = &cli.global;
    match &cli.command {
        Command::Synth { count, scene } => synth(g, *count, scene),
        Command::Match { scene, mode } => do_match(g, scene, *mode),
        Command::SolveChamfer { scene, init_rot_deg, init_trans_m, max_iters, all_points, keypoints_out } => {
            solve_chamfer(g, scene, *init_rot_deg, *init_trans_m, *max_iters, *all_points, keypoints_out.as_deref())
        }
        Command::SolvePnp { scene, iterations } => solve_pnp(g, scene, *iterations),
        Command::Eval { scenes, synthetic, method, ir_threshold, rr_threshold, iterations, scene } => {
            eval(g, scenes.as_deref(), *synthetic, *method, *ir_threshold, *rr_threshold, *iterations, scene)
        }
        Command::GradCheck { instances } => grad_check(g, *instances),
        Command::BoundCheck { instances } => bound_check(g, *instances),
        Command::Bench { count, scene } => bench(g, *count, scene),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
