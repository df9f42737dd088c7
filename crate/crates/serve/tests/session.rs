mod common;

use common::*;
use proptest::prelude::*;
use serde_json::json;
use xvwm_core::eval::detect_marker;
use xvwm_core::sim::{project_to_bev, render, step, Action, AgentState, ViewId};
use xvwm_serve::protocol::{ServerMessage, Stream};
use xvwm_serve::SessionConfig;

fn rt() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap()
}

fn all_views() -> SessionConfig {
    SessionConfig {
        imagined_views: vec![ViewId::Bev, ViewId::OverShoulder, ViewId::Front],
        ..Default::default()
    }
}

#[test]
fn zero_action_repeats_ground_truth() {
    rt().block_on(async {
        let mut s = session(oracle_env(32, all_views()));
        let first = frames(&s.handle_text(&action(0.4, 0.0, 0.2)).await);
        let second = frames(&s.handle_text(&action(0.0, 0.0, 0.0)).await);
        assert_eq!(first.len(), 4);
        assert_eq!(second.len(), 4);
        assert_eq!(first[0].2, Stream::Truth);
        assert_eq!(second[0].2, Stream::Truth);
        assert_eq!(first[0].4, second[0].4);
        let imagined: Vec<ViewId> = second.iter().filter(|f| f.2 == Stream::Imagined).map(|f| f.1).collect();
        assert_eq!(imagined, vec![ViewId::Bev, ViewId::OverShoulder, ViewId::Front]);
    });
}

#[test]
fn frames_of_one_tick_share_the_tick_and_ticks_increase() {
    rt().block_on(async {
        let mut s = session(oracle_env(16, all_views()));
        let mut last = s.tick();
        for i in 0..10 {
            let out = s.handle_text(&action(0.1 * (i % 3) as f64, 0.0, 0.1)).await;
            let ticks: Vec<u64> = out.iter().map(ServerMessage::tick).collect();
            assert!(ticks.iter().all(|&t| t == ticks[0]), "{ticks:?}");
            assert_eq!(ticks[0], last + 1);
            last = ticks[0];
        }
    });
}

#[test]
fn ring_holds_context_window_ending_at_truth() {
    rt().block_on(async {
        let mut s = session(oracle_env(16, SessionConfig::default()));
        let mut truths = Vec::new();
        for i in 0..6 {
            let out = frames(&s.handle_text(&action(0.3, 0.0, 0.1 * i as f64)).await);
            truths.push(out[0].4.clone());
        }
        let ctx = s.context(ViewId::Ego).unwrap();
        assert_eq!(ctx.len(), 4);
        assert_eq!(ctx, truths[2..].to_vec());
    });
}

#[test]
fn empty_whatif_is_one_zero_action_frame() {
    rt().block_on(async {
        let mut s = session(oracle_env(32, SessionConfig::default()));
        s.handle_text(&action(0.5, 0.0, 0.0)).await;
        let before = (s.state(), s.tick());
        let out = frames(&s.handle_text(r#"{"type":"whatif","actions":[],"view":"bev"}"#).await);
        assert_eq!(out.len(), 1);
        let (tick, view, stream, k, f) = &out[0];
        assert_eq!((*tick, *view, *stream, *k), (before.1, ViewId::Bev, Stream::Whatif, 1));
        // The oracle shows the unmoved agent.
        let w = oracle_env(32, SessionConfig::default()).world;
        assert_eq!(f, &render(&w, &before.0, ViewId::Bev, &render_config(32)));
        assert_eq!((s.state(), s.tick()), before);
    });
}

#[test]
fn whatif_rollout_follows_the_action_macro() {
    rt().block_on(async {
        let env = oracle_env(64, SessionConfig::default());
        let world = env.world.clone();
        let mut s = session(env);
        let start = s.state();
        let acts = [(0.5, 0.0, 0.3), (0.5, 0.0, -0.2), (0.0, 0.2, 0.0)];
        let msg = json!({
            "type": "whatif",
            "view": "bev",
            "horizon": 5,
            "actions": acts.iter().map(|a| json!({"dx": a.0, "dy": a.1, "dphi": a.2})).collect::<Vec<_>>(),
        });
        let out = frames(&s.handle_text(&msg.to_string()).await);
        assert_eq!(out.iter().map(|f| f.3).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
        let mut pose = start;
        for (j, f) in out.iter().enumerate() {
            let a = acts.get(j).map(|a| Action::new(a.0, a.1, a.2)).unwrap_or_default();
            pose = step(&world, &pose, &a);
            let det = detect_marker(&f.4);
            let (u, v) = project_to_bev(&world, &render_config(64), pose.x, pose.y).unwrap();
            assert!(det.valid && det.distance_to(u, v) < 1.0, "step {j}: {:?} vs ({u}, {v})", det.centroid);
        }
        assert_eq!(s.state(), start);
    });
}

#[test]
fn live_top_down_marker_tracks_next_pose() {
    rt().block_on(async {
        let env = oracle_env(64, SessionConfig::default());
        let world = env.world.clone();
        let mut s = session(env);
        let mut worst: f64 = 0.0;
        for i in 0..20 {
            let a = Action::new(0.4, 0.05 * (i % 3) as f64 - 0.05, 0.15);
            let out = frames(&s.handle_text(&action(a.dx, a.dy, a.dphi)).await);
            let imagined = out.iter().find(|f| f.2 == Stream::Imagined && f.1 == ViewId::Bev).unwrap();
            // Live imagination holds the current action for one more tick.
            let next = step(&world, &s.state(), &a);
            let (u, v) = project_to_bev(&world, &render_config(64), next.x, next.y).unwrap();
            let det = detect_marker(&imagined.4);
            assert!(det.valid);
            worst = worst.max(det.distance_to(u, v));
        }
        assert!(worst < 1.0, "worst localization {worst}");
    });
}

#[test]
fn view_outside_model_set_is_an_error_and_session_continues() {
    rt().block_on(async {
        let mut s = session(model_env(tiny_model(), SessionConfig::default()));
        let out = s.handle_text(r#"{"type":"configure","imagined_views":["bev","front"]}"#).await;
        let (code, field, echo) = error_field(&out).unwrap();
        assert_eq!(code, "view");
        assert_eq!(field.as_deref(), Some("imagined_views[1]"));
        assert_eq!(echo, Some(json!("front")));
        let out = s.handle_text(r#"{"type":"whatif","view":"over_shoulder"}"#).await;
        assert_eq!(error_field(&out).unwrap().0, "view");

        let out = frames(&s.handle_text(&action(0.2, 0.0, 0.0)).await);
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].1, ViewId::Bev);
    });
}

#[test]
fn configure_is_echoed_and_checkpoint_checked() {
    rt().block_on(async {
        let mut s = session(model_env(tiny_model(), SessionConfig::default()));
        let out = s
            .handle_text(r#"{"type":"configure","steer_view":"bev","imagined_views":["ego","ego"],"checkpoint":"untrained"}"#)
            .await;
        match &out[..] {
            [ServerMessage::Configure {
                steer_view,
                imagined_views,
                checkpoint,
                ..
            }] => {
                assert_eq!(*steer_view, ViewId::Bev);
                assert_eq!(imagined_views, &vec![ViewId::Ego]);
                assert_eq!(checkpoint, "untrained");
            }
            other => panic!("{other:?}"),
        }
        let out = s.handle_text(r#"{"type":"configure","checkpoint":"other"}"#).await;
        assert_eq!(error_field(&out).unwrap().0, "checkpoint");
        assert_eq!(s.steer_view(), ViewId::Bev);
    });
}

#[test]
fn malformed_messages_name_the_field() {
    rt().block_on(async {
        let mut s = session(oracle_env(16, SessionConfig::default()));
        let before = s.state();
        let cases = [
            (r#"{"type":"action","dx":0.1,"dy":0}"#, Some("dphi")),
            (r#"{"type":"action","dx":5,"dy":0,"dphi":0}"#, Some("dx")),
            (r#"{"type":"whatif","view":"bev","actions":[{"dx":0,"dy":0,"dphi":9}]}"#, Some("actions[0].dphi")),
            (r#"{"type":"whatif","view":"bev","horizon":0}"#, Some("horizon")),
            (r#"{"type":"whatif","view":"bev","horizon":26}"#, Some("horizon")),
            (r#"{"type":"reset","seed":1,"pose":{"x":-3,"y":1,"yaw":0}}"#, Some("pose")),
            (r#"{"type":"frame"}"#, Some("type")),
            (r#"{"type":"hello","protocol_version":9}"#, Some("protocol_version")),
            (r#"[1,2]"#, None),
        ];
        for (msg, field) in cases {
            let out = s.handle_text(msg).await;
            let (_, f, _) = error_field(&out).unwrap_or_else(|| panic!("{msg}: {out:?}"));
            assert_eq!(f.as_deref(), field, "{msg}");
        }
        assert_eq!(s.state(), before);
        assert_eq!(s.tick(), 0);
    });
}

#[test]
fn reset_places_agent_and_restarts_context() {
    rt().block_on(async {
        let env = oracle_env(16, SessionConfig::default());
        let world = env.world.clone();
        let mut s = session(env);
        s.handle_text(&action(0.5, 0.0, 0.5)).await;
        let pose = world.random_free_pose(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(40));
        let msg = json!({"type": "reset", "seed": 3, "pose": {"x": pose.x, "y": pose.y, "yaw": pose.yaw}});
        let out = s.handle_text(&msg.to_string()).await;
        assert!(matches!(out[0], ServerMessage::Reset { tick: 2, seed: 3, .. }));
        assert_eq!(s.state(), pose);
        let truth = render(&world, &pose, ViewId::Ego, &render_config(16));
        assert_eq!(s.context(ViewId::Ego).unwrap(), vec![truth; 4]);

        // Without a pose the seed decides the spawn point.
        s.handle_text(r#"{"type":"reset","seed":11}"#).await;
        let a = s.state();
        s.handle_text(r#"{"type":"reset","seed":11}"#).await;
        assert_eq!(s.state(), a);
        assert!(world.is_free(&a));
    });
}

#[test]
fn model_sessions_are_deterministic_and_independent() {
    rt().block_on(async {
        let env = model_env(tiny_model(), SessionConfig::default());
        let mut a = session(env.clone());
        let mut b = session(env.clone());
        let mut c = session(env);
        let script = [action(0.3, 0.0, 0.1), action(0.0, 0.1, 0.0), r#"{"type":"whatif","view":"bev","horizon":3}"#.to_string()];
        let mut out_a = Vec::new();
        for m in &script {
            out_a.extend(a.handle_text(m).await);
        }
        // Same script on a fresh session, with unrelated traffic on b in between.
        let mut out_c = Vec::new();
        for m in &script {
            b.handle_text(&action(0.7, 0.0, -0.4)).await;
            b.handle_text(r#"{"type":"reset","seed":4}"#).await;
            out_c.extend(c.handle_text(m).await);
        }
        assert_eq!(out_a, out_c);
        assert_eq!(a.state(), c.state());
        assert_ne!(a.state(), b.state());
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn whatif_never_moves_the_agent(
        moves in prop::collection::vec((-0.5f64..0.5, -0.3f64..0.3, -0.7f64..0.7), 0..5),
        preview in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -0.78f64..0.78), 0..6),
        horizon in 6usize..9,
    ) {
        rt().block_on(async {
            let mut s = session(oracle_env(16, SessionConfig::default()));
            for m in &moves {
                s.handle_text(&action(m.0, m.1, m.2)).await;
            }
            let before: (AgentState, u64, _) = (s.state(), s.tick(), s.context(ViewId::Ego));
            let msg = json!({
                "type": "whatif",
                "view": "bev",
                "horizon": horizon,
                "actions": preview.iter().map(|a| json!({"dx": a.0, "dy": a.1, "dphi": a.2})).collect::<Vec<_>>(),
            });
            let out = s.handle_text(&msg.to_string()).await;
            prop_assert_eq!(frames(&out).len(), horizon);
            prop_assert_eq!((s.state(), s.tick(), s.context(ViewId::Ego)), before);
            Ok(())
        })?;
    }
}
