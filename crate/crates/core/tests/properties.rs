use mincd::blindpnp::{check_inequality, InlierConfig};
use mincd::chamfer::{chamfer_cost, solve_pose_chamfer, SolverConfig};
use mincd::eval::{registration_success, MetricConfig};
use mincd::features::{CorrespondenceSet, KeypointSet2D, KeypointSet3D, MatchConfig};
use mincd::geometry::{rotation_angle, se3_log};
use mincd::keypoint::{select_3d_keypoints, SelectConfig};
use mincd::synth::{generate_scene, perturb_pose, NoiseSpec, SceneConfig, ScenePair};
use proptest::prelude::*;

fn scene(seed: u64, n: usize, pixel_noise: f64, feature_noise: f64, outliers: f64) -> ScenePair {
    let cfg = SceneConfig { n_points: n, feature_dim: 16, ..Default::default() };
    let noise = NoiseSpec {
        pixel_noise_sigma: pixel_noise,
        feature_noise_sigma: feature_noise,
        outlier_rate: outliers,
        ..NoiseSpec::noiseless(seed)
    };
    generate_scene(&cfg, &noise).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matched_count_never_exceeds_relaxed_count(
        seed in 0u64..10_000,
        n in 4usize..60,
        sigma in 0.0f64..5.0,
        outliers in 0.0f64..0.9,
        tau in 0.1f64..100.0,
        rot in 0.0f64..3.0,
    ) {
        let s = scene(seed, n, sigma, 0.0, outliers);
        let pose = perturb_pose(&s.t_gt, rot, 0.0, seed);
        let check = check_inequality(&pose, &s.gt_pairs, &s.pixels, &s.cloud, &s.k, &InlierConfig { tau }).unwrap();
        prop_assert!(check.holds);
        prop_assert!(check.kappa <= s.gt_pairs.len());
        prop_assert!(check.kappa_star <= s.pixels.len() + s.cloud.len());
    }

    #[test]
    fn chamfer_cost_ignores_order(seed in 0u64..10_000, n in 2usize..40, rot in 0.0f64..5.0) {
        let s = scene(seed, n, 1.0, 0.0, 0.2);
        let pose = perturb_pose(&s.t_gt, rot, 0.05, seed);
        let base = chamfer_cost(&pose, &s.pixels, &s.cloud, &s.k).unwrap().value;
        let rev_px: Vec<_> = s.pixels.pixels().iter().rev().copied().collect();
        let rev_pts: Vec<_> = s.cloud.points().iter().rev().copied().collect();
        let shuffled = chamfer_cost(
            &pose,
            &KeypointSet2D::from_pixels(rev_px).unwrap(),
            &KeypointSet3D::from_points(rev_pts).unwrap(),
            &s.k,
        )
        .unwrap()
        .value;
        prop_assert!(base >= 0.0);
        prop_assert!((base - shuffled).abs() <= 1e-9 * base.max(1.0));
    }

    #[test]
    fn perturbation_has_exact_magnitude(seed in 0u64..10_000, deg in 0.0f64..170.0, trans in 0.0f64..2.0) {
        let s = scene(seed, 3, 0.0, 0.0, 0.0);
        let p = perturb_pose(&s.t_gt, deg, trans, seed);
        let rel = p.rotation * s.t_gt.rotation.transpose();
        prop_assert!((rotation_angle(&rel).to_degrees() - deg).abs() <= 1e-9);
        prop_assert!((p.translation_error(&s.t_gt) - trans).abs() <= 1e-12);
        if deg < 179.0 {
            prop_assert!(se3_log(&p.compose(&s.t_gt.inverse())).is_ok());
        }
    }

    #[test]
    fn recall_thresholds_nest(seed in 0u64..10_000, rot in 0.0f64..2.0, a in 0.001f64..0.5, b in 0.001f64..0.5) {
        let s = scene(seed, 30, 0.0, 0.0, 0.0);
        let est = perturb_pose(&s.t_gt, rot, 0.02, seed);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let at = |thr| registration_success(&est, &s, &MetricConfig { rr_threshold_m: thr, ..Default::default() });
        let (rl, rh) = (at(lo), at(hi));
        prop_assert_eq!(rl.rmse_m, rh.rmse_m);
        prop_assert!(!rl.success || rh.success);
    }

    #[test]
    fn selection_grows_with_threshold(seed in 0u64..10_000, a in 0.05f64..1.5, b in 0.05f64..1.5) {
        let s = scene(seed, 60, 0.0, 0.5, 0.3);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let m = MatchConfig::default();
        let small = select_3d_keypoints(&s.pixels, &s.cloud, &SelectConfig::new(lo, 5.0).unwrap(), &m).unwrap();
        let large = select_3d_keypoints(&s.pixels, &s.cloud, &SelectConfig::new(hi, 5.0).unwrap(), &m).unwrap();
        prop_assert!(small.point_indices().is_subset(&large.point_indices()));
        prop_assert!(small.entries.iter().all(|e| e.score <= lo));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn chamfer_solver_trace_is_monotone(seed in 0u64..10_000, rot in 0.5f64..8.0, trans in 0.0f64..0.2) {
        let s = scene(seed, 80, 0.5, 0.0, 0.1);
        let init = perturb_pose(&s.t_gt, rot, trans, seed + 1);
        let initial = chamfer_cost(&init, &s.pixels, &s.cloud, &s.k).unwrap().value;
        if let Ok(r) = solve_pose_chamfer(&init, &s.pixels, &s.cloud, &s.k, &SolverConfig::default()) {
            prop_assert!(r.trace.windows(2).all(|w| w[1].cost <= w[0].cost));
            prop_assert!(r.cost <= initial);
            prop_assert_eq!(r.trace[0].cost, initial);
        }
    }
}

#[test]
fn gt_pairs_survive_dropout() {
    let cfg = SceneConfig { n_points: 50, feature_dim: 4, ..Default::default() };
    let s = generate_scene(&cfg, &NoiseSpec { dropout_rate: 0.3, ..NoiseSpec::noiseless(2) }).unwrap();
    assert_eq!(s.pixels.len(), 35);
    let c: &CorrespondenceSet = &s.gt_pairs;
    assert!(c.is_one_to_one());
    assert!(c.iter().all(|p| s.meta.dropped_points.binary_search(&p.j).is_err()));
}
