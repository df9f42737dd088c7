use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xvwm_core::dataset::{generate_episode, Episode, PolicyConfig, PolicyKind};
use xvwm_core::eval::{
    detect_marker, localization_eval, metric_matrix, mse, pixel_metrics, spawn_eval, ssim, trajectory_eval,
    transfer_study, ConstantGray, CopyAnchorOutput, CopyLastContext, EvalProtocol, SimulatorOracle, TestSet,
    TransferEntry,
};
use xvwm_core::sim::{make_world, marker_length_px, project_to_bev, render, Frame, RenderConfig, ViewId, World, WorldConfig};
use xvwm_core::training::Exposure;

fn world() -> World {
    make_world(0, &WorldConfig::default()).unwrap()
}

fn test_set(n: u64, seconds: f64, policy: PolicyConfig) -> TestSet {
    let w = world();
    let rcfg = RenderConfig::default();
    let episodes: Vec<Episode> = (0..n)
        .map(|s| {
            let ep_world = w.with_sky((s % 6) as u8);
            let mut ep = generate_episode(&ep_world, &policy, &rcfg, &ViewId::ALL, seconds, 5.0, 100 + s).unwrap();
            ep.id = s;
            ep
        })
        .collect();
    TestSet {
        episodes,
        world: w,
        render: rcfg,
    }
}

fn protocol() -> EvalProtocol {
    EvalProtocol {
        bootstrap_resamples: 200,
        ..Default::default()
    }
}

#[test]
fn inverted_two_level_image_has_closed_form_mse() {
    let n = 16;
    let mut gt = Frame::filled(n, [0, 0, 0]);
    for y in 0..n {
        for x in n / 2..n {
            gt.set(x, y, [255, 255, 255]);
        }
    }
    let inv = Frame::new(n, n, gt.pixels().iter().map(|p| 255 - p).collect()).unwrap();
    let m = pixel_metrics(&inv, &gt).unwrap();
    assert_eq!(m.mse, 1.0);
    assert_eq!(m.psnr, 0.0);

    let gray = Frame::new(n, n, (0..n * n * 3).map(|i| if i % 2 == 0 { 64 } else { 192 }).collect()).unwrap();
    let inv = Frame::new(n, n, gray.pixels().iter().map(|p| 255 - p).collect()).unwrap();
    // 64 <-> 191 and 192 <-> 63: differences 127 and 129 in equal numbers.
    let expected = (127.0f64.powi(2) + 129.0f64.powi(2)) / 2.0 / 255.0f64.powi(2);
    assert!((mse(&inv, &gray).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn ssim_of_flat_frames_is_luminance_term() {
    let (a, b) = (Frame::filled(16, [40, 40, 40]), Frame::filled(16, [200, 200, 200]));
    let (ma, mb) = (40.0 / 255.0, 200.0 / 255.0);
    let c1 = 0.0001;
    let expected = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
    assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn ssim_is_symmetric_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let a = Frame::new(16, 16, (0..768).map(|_| rng.gen()).collect()).unwrap();
        let b = Frame::new(16, 16, (0..768).map(|_| rng.gen()).collect()).unwrap();
        let (s1, s2) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!((s1 - s2).abs() < 1e-9);
        assert!(s1 <= 1.0 && s1 >= -1.0);
    }
    assert_eq!(pixel_metrics(&Frame::filled(16, [0; 3]), &Frame::filled(8, [0; 3])).unwrap_err().class(), "usage");
}

#[test]
fn detector_agrees_with_renderer() {
    let w = world();
    let r = RenderConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_pos, mut worst_angle) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let s = w.random_free_pose(&mut rng);
        let d = detect_marker(&render(&w, &s, ViewId::Bev, &r));
        assert!(d.valid && !d.ambiguous);
        assert!(d.pixel_count >= 4);
        assert!((0.0..std::f64::consts::TAU).contains(&d.orientation));
        let (u, v) = project_to_bev(&w, &r, s.x, s.y).unwrap();
        worst_pos = worst_pos.max(d.distance_to(u, v));
        worst_angle = worst_angle.max(xvwm_core::eval::angular_error(d.orientation, s.yaw));
    }
    assert!(worst_pos < 1.0, "{worst_pos}");
    assert!(worst_angle < 10f64.to_radians(), "{}", worst_angle.to_degrees());
}

#[test]
fn two_markers_give_mass_mean_and_ambiguity() {
    let w = world();
    let r = RenderConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = w.random_free_pose(&mut rng);
    let b = loop {
        let b = w.random_free_pose(&mut rng);
        if (a.x - b.x).hypot(a.y - b.y) > 4.0 {
            break b;
        }
    };
    let fa = render(&w, &a, ViewId::Bev, &r);
    let fb = render(&w, &b, ViewId::Bev, &r);
    let mut merged = fa.clone();
    let n = r.size;
    // Copy the red pixels of the second marker onto the first frame.
    for y in 0..n {
        for x in 0..n {
            let [rr, g, bb] = fb.get(x, y);
            if rr >= 200 && g <= 80 && bb <= 80 {
                merged.set(x, y, fb.get(x, y));
            }
        }
    }
    // Oracle: weighted mean of every marker pixel, computed directly.
    let (mut m, mut su, mut sv) = (0.0, 0.0, 0.0);
    for y in 0..n {
        for x in 0..n {
            let [rr, g, bb] = merged.get(x, y);
            if rr >= 200 && g <= 80 && bb <= 80 {
                let wt = (80.0 - g.max(bb) as f64) / 80.0;
                m += wt;
                su += wt * (x as f64 + 0.5);
                sv += wt * (y as f64 + 0.5);
            }
        }
    }
    let d = detect_marker(&merged);
    assert!(d.valid);
    assert!(d.ambiguous);
    assert!(d.distance_to(su / m, sv / m) < 1e-6);
    let sep = {
        let (ua, va) = project_to_bev(&w, &r, a.x, a.y).unwrap();
        let (ub, vb) = project_to_bev(&w, &r, b.x, b.y).unwrap();
        ((ua - ub).powi(2) + (va - vb).powi(2)).sqrt()
    };
    assert!(sep > marker_length_px(n));
    assert!(!detect_marker(&fa).ambiguous);
}

#[test]
fn all_black_is_invalid() {
    assert!(!detect_marker(&Frame::filled(64, [0, 0, 0])).valid);
}

#[test]
fn oracle_is_ideal_on_every_protocol() {
    let test = test_set(3, 20.0, PolicyConfig::default());
    let oracle = SimulatorOracle {
        render: test.render.clone(),
    };
    let p = protocol();

    let loc = localization_eval(&oracle, &test, &p, &ViewId::ALL).unwrap();
    assert_eq!(loc.threshold_a_px, 1.5);
    for row in &loc.rows {
        assert_eq!(row.invalid, 0);
        assert!(row.median_valid_px <= 1.0);
        assert_eq!(row.success_a, 1.0);
        assert!(row.success_a <= row.success_b);
    }

    let tr = trajectory_eval(&oracle, &test, &test.episodes[0], 1, 0).unwrap();
    assert_eq!(tr.steps.len(), test.episodes[0].len() - 4);
    assert!(tr.max_px <= 1.0, "{}", tr.max_px);
    assert!((tr.steps.last().unwrap().time_s - 20.0).abs() < 0.21);
    for w in tr.steps.windows(2) {
        assert!((w[1].time_s - w[0].time_s - 0.2).abs() < 1e-9);
    }

    let sp = spawn_eval(&oracle, &test, &p).unwrap();
    assert_eq!(sp.exact_sky.mse.mean, 0.0);
    assert!(sp.per_sample_exact.iter().all(|m| m.mse == 0.0));

    let mx = metric_matrix(&oracle, &test, &p, &ViewId::ALL).unwrap();
    assert_eq!(mx.cells.len(), 16);
    assert!(mx.cells.iter().all(|c| c.metrics.mse.mean == 0.0));
}

#[test]
fn copy_last_top_down_error_tracks_displacement() {
    let test = test_set(4, 20.0, PolicyConfig::default());
    let p = protocol();
    let loc = localization_eval(&CopyAnchorOutput, &test, &p, &[ViewId::Ego]).unwrap();
    let row = &loc.rows[0];
    let mut disp = Vec::new();
    for ep in &test.episodes {
        for t in p.anchors(ep.len(), p.horizon).unwrap() {
            let (a, b) = (ep.poses[t], ep.poses[t + p.horizon]);
            let (ua, va) = project_to_bev(&test.world, &test.render, a.x, a.y).unwrap();
            let (ub, vb) = project_to_bev(&test.world, &test.render, b.x, b.y).unwrap();
            disp.push(((ua - ub).powi(2) + (va - vb).powi(2)).sqrt());
        }
    }
    for (e, d) in row.errors.iter().zip(&disp) {
        assert!((e.unwrap() - d).abs() < 1.0);
    }
    assert!(row.median_valid_px >= xvwm_core::eval::median(&disp) - 1.0);
    assert!(row.success_a <= row.success_b);
}

#[test]
fn stationary_trace_is_a_fixed_point() {
    let policy = PolicyConfig {
        kind: PolicyKind::Stationary,
        ..Default::default()
    };
    let test = test_set(1, 4.0, policy);
    let ep = &test.episodes[0];
    let oracle = SimulatorOracle {
        render: test.render.clone(),
    };
    let tr = trajectory_eval(&oracle, &test, ep, 1, 0).unwrap();
    let first = tr.steps[0].truth_px;
    for s in &tr.steps {
        assert_eq!(s.truth_px, first);
        assert!(s.error_px.unwrap() <= 1.0);
    }
}

#[test]
fn spawn_sky_agnostic_dominates_exact() {
    let test = test_set(3, 8.0, PolicyConfig::default());
    let p = protocol();
    for pred in [&ConstantGray as &dyn xvwm_core::eval::Predictor, &CopyLastContext] {
        let row = spawn_eval(pred, &test, &p).unwrap();
        for (e, a) in row.per_sample_exact.iter().zip(&row.per_sample_agnostic) {
            assert!(a.ssim >= e.ssim && a.mse <= e.mse && a.psnr >= e.psnr);
        }
    }
}

#[test]
fn transfer_rows_follow_entries_and_check_sizes() {
    let test = test_set(2, 8.0, PolicyConfig::default());
    let p = EvalProtocol {
        horizon: 5,
        anchors_per_episode: 2,
        bootstrap_resamples: 50,
        ..Default::default()
    };
    let oracle = SimulatorOracle {
        render: test.render.clone(),
    };
    let mut single = Exposure::default();
    for _ in 0..100 {
        single.record(ViewId::Ego, ViewId::Ego);
    }
    let mut two = Exposure::default();
    for (i, o) in [(ViewId::Ego, ViewId::Ego), (ViewId::Ego, ViewId::Bev), (ViewId::Bev, ViewId::Ego), (ViewId::Bev, ViewId::Bev)] {
        for _ in 0..25 {
            two.record(i, o);
        }
    }
    let entry = |label: &str, scheme: &str, exposure, size| TransferEntry {
        label: label.into(),
        scheme: scheme.into(),
        step: 10,
        exposure,
        image_size: size,
        predictor: &oracle,
    };
    let rep = transfer_study(
        &[
            entry("single", "single_view", single, 64),
            entry("two", "two_view", two, 64),
            entry("gray", "single_view", single, 64),
        ],
        &test,
        &p,
    )
    .unwrap();
    assert_eq!(rep.rows.len(), 3);
    assert_eq!(rep.rows[0].ego_ego_share, 1.0);
    assert_eq!(rep.rows[1].ego_ego_share, 0.25);
    let svg = xvwm_core::eval::report::transfer_svg(&rep);
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    let err = transfer_study(&[entry("bad", "two_view", two, 32)], &test, &p).unwrap_err();
    assert_eq!(err.class(), "config");
}

#[test]
fn model_without_top_down_view_is_rejected() {
    let test = test_set(1, 8.0, PolicyConfig::default());
    let cfg = xvwm_core::model::ModelConfig {
        image_size: 64,
        hidden_dim: 16,
        layers: 1,
        views: vec![ViewId::Ego],
        ..Default::default()
    };
    let model = xvwm_core::model::Model::new(cfg, 0).unwrap();
    let pred = xvwm_core::eval::ModelPredictor::new(&model, 2);
    let err = localization_eval(&pred, &test, &protocol(), &[ViewId::Ego]).unwrap_err();
    assert_eq!(err.class(), "config");
}
