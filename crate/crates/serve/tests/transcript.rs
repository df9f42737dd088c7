//! Golden protocol transcript: client messages and the exact server
//! replies, replayed against a session and over a live socket.

mod common;

use std::path::PathBuf;

use common::*;
use futures::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio_tungstenite::tungstenite::Message;
use xvwm_serve::protocol::ServerMessage;
use xvwm_serve::{serve, AppState, SessionConfig};

const SIZE: usize = 16;

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/transcript_v1.jsonl")
}

fn script() -> Vec<Value> {
    vec![
        json!({"type": "hello", "protocol_version": 1}),
        json!({"type": "configure", "steer_view": "ego", "imagined_views": ["bev", "front"]}),
        json!({"type": "action", "tick": 0, "dx": 0.4, "dy": 0.0, "dphi": 0.0}),
        json!({"type": "action", "tick": 1, "dx": 0.4, "dy": 0.1, "dphi": 0.3}),
        json!({"type": "action", "tick": 2, "dx": 0.0, "dy": 0.0, "dphi": 0.0}),
        json!({"type": "whatif", "actions": [], "view": "bev"}),
        json!({"type": "whatif", "actions": [{"dx": 0.5, "dy": 0.0, "dphi": 0.2}, {"dx": 0.5, "dy": 0.0, "dphi": 0.2}], "view": "bev", "horizon": 3}),
        json!({"type": "action", "dx": "fast", "dy": 0.0, "dphi": 0.0}),
        json!({"type": "configure", "checkpoint": "elsewhere"}),
        json!({"type": "reset", "seed": 5}),
        json!({"type": "action", "dx": 0.2, "dy": 0.0, "dphi": -0.3}),
    ]
}

fn env() -> xvwm_serve::SessionEnv {
    oracle_env(SIZE, SessionConfig::default())
}

#[derive(Debug, PartialEq)]
enum Line {
    Client(Value),
    Server(ServerMessage),
}

async fn record() -> Vec<Line> {
    let mut s = xvwm_serve::Session::new("golden", env()).unwrap();
    let mut lines = vec![Line::Server(s.hello())];
    for msg in script() {
        let replies = s.handle_text(&msg.to_string()).await;
        lines.push(Line::Client(msg));
        lines.extend(replies.into_iter().map(Line::Server));
    }
    lines
}

fn write_golden(lines: &[Line]) {
    let mut text = String::new();
    for l in lines {
        let v = match l {
            Line::Client(m) => json!({"from": "client", "msg": m}),
            Line::Server(m) => json!({"from": "server", "msg": serde_json::to_value(m).unwrap()}),
        };
        text.push_str(&v.to_string());
        text.push('\n');
    }
    std::fs::create_dir_all(golden_path().parent().unwrap()).unwrap();
    std::fs::write(golden_path(), text).unwrap();
}

fn read_golden() -> Vec<Line> {
    let text = std::fs::read_to_string(golden_path()).expect("golden transcript missing; run with XVWM_BLESS=1");
    text.lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            match v["from"].as_str() {
                Some("client") => Line::Client(v["msg"].clone()),
                Some("server") => Line::Server(serde_json::from_value(v["msg"].clone()).unwrap()),
                other => panic!("bad direction {other:?}"),
            }
        })
        .collect()
}

#[test]
fn session_reproduces_golden_transcript() {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    let lines = rt.block_on(record());
    if std::env::var_os("XVWM_BLESS").is_some() {
        write_golden(&lines);
    }
    let golden = read_golden();
    assert_eq!(lines.len(), golden.len());
    for (i, (a, b)) in lines.iter().zip(&golden).enumerate() {
        assert_eq!(a, b, "transcript line {}", i + 1);
    }
}

#[test]
fn golden_transcript_covers_every_server_message_type() {
    let kinds: std::collections::BTreeSet<String> = read_golden()
        .iter()
        .filter_map(|l| match l {
            Line::Server(m) => Some(serde_json::to_value(m).unwrap()["type"].as_str().unwrap().to_string()),
            Line::Client(_) => None,
        })
        .collect();
    let want: std::collections::BTreeSet<String> =
        ["hello", "configure", "reset", "frame", "error"].iter().map(|s| s.to_string()).collect();
    assert_eq!(kinds, want);
}

fn without_session_id(m: &ServerMessage) -> ServerMessage {
    let mut m = m.clone();
    if let ServerMessage::Hello { session_id, .. } = &mut m {
        session_id.clear();
    }
    m
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn socket_replays_golden_transcript() {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(listener, AppState::new(env())));
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.unwrap();

    let golden = read_golden();
    let mut pending_sends = Vec::new();
    let mut expected = Vec::new();
    for l in &golden {
        match l {
            Line::Client(v) => pending_sends.push((expected.len(), v.clone())),
            Line::Server(m) => expected.push(without_session_id(m)),
        }
    }
    let mut got = Vec::new();
    let mut sends = pending_sends.into_iter().peekable();
    while got.len() < expected.len() {
        while let Some((_, v)) = sends.next_if(|(at, _)| *at == got.len()) {
            ws.send(Message::Text(v.to_string())).await.unwrap();
        }
        match ws.next().await.unwrap().unwrap() {
            Message::Text(t) => got.push(without_session_id(&serde_json::from_str(&t).unwrap())),
            _ => continue,
        }
    }
    assert_eq!(got, expected);
    ws.close(None).await.unwrap();
}
