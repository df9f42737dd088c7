//! End-to-end socket sessions against a full-size untrained model.

mod common;

use std::time::Instant;

use common::*;
use futures::{SinkExt, StreamExt};
use serde_json::json;
use tokio::net::TcpListener;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};
use xvwm_core::model::ModelConfig;
use xvwm_serve::protocol::{decode_frame, Pose, ServerMessage, Stream};
use xvwm_serve::{serve, AppState, SessionConfig};

type Socket = WebSocketStream<MaybeTlsStream<tokio::net::TcpStream>>;

async fn start(env: xvwm_serve::SessionEnv) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(listener, AppState::new(env)));
    format!("ws://{addr}/ws")
}

async fn recv(ws: &mut Socket) -> ServerMessage {
    loop {
        if let Message::Text(t) = ws.next().await.unwrap().unwrap() {
            return serde_json::from_str(&t).unwrap();
        }
    }
}

async fn exchange(ws: &mut Socket, msg: String, replies: usize) -> Vec<ServerMessage> {
    ws.send(Message::Text(msg)).await.unwrap();
    let mut out = Vec::with_capacity(replies);
    for _ in 0..replies {
        out.push(recv(ws).await);
    }
    out
}

fn truth_pose(msgs: &[ServerMessage]) -> Pose {
    msgs.iter()
        .find_map(|m| match m {
            ServerMessage::Frame {
                stream: Stream::Truth,
                pose,
                ..
            } => *pose,
            _ => None,
        })
        .unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn two_streams_at_five_hertz() {
    let url = start(model_env(ModelConfig::default(), SessionConfig::default())).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();
    let hello = recv(&mut ws).await;
    assert!(matches!(hello, ServerMessage::Hello { image_size: 64, .. }));

    let t0 = Instant::now();
    let mut last_tick = 0;
    for i in 0..25 {
        let out = exchange(&mut ws, action(0.3, 0.0, if i % 5 == 0 { 0.4 } else { 0.0 }), 2).await;
        let ticks: Vec<u64> = out.iter().map(ServerMessage::tick).collect();
        assert_eq!(ticks, vec![last_tick + 1; 2]);
        last_tick = ticks[0];
        let streams: Vec<Stream> = out
            .iter()
            .map(|m| match m {
                ServerMessage::Frame { stream, payload, .. } => {
                    assert_eq!(decode_frame(payload).unwrap().size(), 64);
                    *stream
                }
                other => panic!("{other:?}"),
            })
            .collect();
        assert_eq!(streams, vec![Stream::Truth, Stream::Imagined]);
    }
    let rate = 25.0 / t0.elapsed().as_secs_f64();
    eprintln!("live rate {rate:.1} Hz");
    assert!(rate >= 5.0, "live rate {rate:.2} Hz");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn whatif_over_socket_leaves_pose_unchanged() {
    let url = start(model_env(tiny_model(), SessionConfig::default())).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();
    recv(&mut ws).await;
    let before = truth_pose(&exchange(&mut ws, action(0.5, 0.0, 0.2), 2).await);
    let preview = json!({
        "type": "whatif",
        "view": "bev",
        "actions": [{"dx": 1.0, "dy": 0.0, "dphi": 0.0}, {"dx": 1.0, "dy": 0.0, "dphi": 0.0}],
        "horizon": 4,
    });
    let frames = exchange(&mut ws, preview.to_string(), 4).await;
    assert!(frames
        .iter()
        .all(|m| matches!(m, ServerMessage::Frame { stream: Stream::Whatif, tick: 1, .. })));
    let after = truth_pose(&exchange(&mut ws, action(0.0, 0.0, 0.0), 2).await);
    assert_eq!(before, after);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_sessions_keep_their_own_state() {
    let url = start(oracle_env(16, SessionConfig::default())).await;
    let (mut a, _) = tokio_tungstenite::connect_async(&url).await.unwrap();
    let (mut b, _) = tokio_tungstenite::connect_async(&url).await.unwrap();
    let (ha, hb) = (recv(&mut a).await, recv(&mut b).await);
    let id = |m: &ServerMessage| match m {
        ServerMessage::Hello { session_id, .. } => session_id.clone(),
        other => panic!("{other:?}"),
    };
    assert_ne!(id(&ha), id(&hb));

    let start_b = truth_pose(&exchange(&mut b, action(0.0, 0.0, 0.0), 2).await);
    for _ in 0..5 {
        exchange(&mut a, action(0.5, 0.0, 0.3), 2).await;
    }
    let still_b = truth_pose(&exchange(&mut b, action(0.0, 0.0, 0.0), 2).await);
    assert_eq!(start_b, still_b);

    let err = exchange(&mut a, "{\"type\":\"nope\"}".into(), 1).await;
    assert!(matches!(&err[0], ServerMessage::Error { field: Some(f), .. } if f == "type"));
    // The session survives protocol errors.
    let out = exchange(&mut a, action(0.1, 0.0, 0.0), 2).await;
    assert_eq!(out[0].tick(), 6);
}
