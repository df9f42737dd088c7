//! WebSocket endpoint: one session per connection at `/ws`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde_json::json;
use tokio::net::TcpListener;

use crate::protocol::{ErrorCode, ServerMessage, PROTOCOL_VERSION};
use crate::session::{Session, SessionEnv};

#[derive(Clone)]
pub struct AppState {
    env: SessionEnv,
    next_id: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(env: SessionEnv) -> Self {
        Self {
            env,
            next_id: Arc::new(AtomicU64::new(1)),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/ws", get(upgrade))
        .route("/health", get(health))
        .with_state(state)
}

/// Serve until the listener fails.
pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({
        "protocol_version": PROTOCOL_VERSION,
        "checkpoint": state.env.checkpoint_id,
        "views": state.env.worker.views(),
    }))
}

async fn upgrade(ws: WebSocketUpgrade, State(state): State<AppState>) -> Response {
    let id = state.next_id.fetch_add(1, Ordering::Relaxed);
    match Session::new(format!("s{id}"), state.env.clone()) {
        Ok(session) => ws.on_upgrade(move |socket| run_session(socket, session)),
        Err(msg) => (axum::http::StatusCode::INTERNAL_SERVER_ERROR, msg).into_response(),
    }
}

async fn send(socket: &mut WebSocket, msg: &ServerMessage) -> bool {
    socket.send(Message::Text(msg.to_json())).await.is_ok()
}

/// Messages of one connection are handled strictly in arrival order.
async fn run_session(mut socket: WebSocket, mut session: Session) {
    if !send(&mut socket, &session.hello()).await {
        return;
    }
    while let Some(Ok(msg)) = socket.recv().await {
        let replies = match msg {
            Message::Text(text) => session.handle_text(&text).await,
            Message::Binary(_) => vec![ServerMessage::Error {
                tick: session.tick(),
                code: ErrorCode::Protocol,
                message: "binary messages are not part of the protocol".into(),
                field: None,
                echo: None,
            }],
            Message::Close(_) => break,
            Message::Ping(_) | Message::Pong(_) => continue,
        };
        for r in &replies {
            if !send(&mut socket, r).await {
                return;
            }
        }
    }
}
