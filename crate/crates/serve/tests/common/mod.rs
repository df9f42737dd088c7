#![allow(dead_code)]

use std::sync::Arc;

use serde_json::{json, Value};
use xvwm_core::model::{Model, ModelConfig};
use xvwm_core::sim::{make_world, Frame, RenderConfig, ViewId, WorldConfig};
use xvwm_serve::protocol::{decode_frame, ServerMessage, Stream};
use xvwm_serve::{Backend, Session, SessionConfig, SessionEnv, Worker};

pub const WORLD_SEED: u64 = 2;

pub fn render_config(size: usize) -> RenderConfig {
    RenderConfig {
        size,
        ..Default::default()
    }
}

pub fn oracle_env(size: usize, config: SessionConfig) -> SessionEnv {
    SessionEnv {
        config,
        world: Arc::new(make_world(WORLD_SEED, &WorldConfig::default()).unwrap()),
        render: render_config(size),
        checkpoint_id: "oracle".into(),
        worker: Worker::spawn(Backend::Oracle(render_config(size))),
    }
}

/// Untrained model over ego and top-down views.
pub fn model_env(model: ModelConfig, config: SessionConfig) -> SessionEnv {
    let size = model.image_size;
    SessionEnv {
        config,
        world: Arc::new(make_world(WORLD_SEED, &WorldConfig::default()).unwrap()),
        render: render_config(size),
        checkpoint_id: "untrained".into(),
        worker: Worker::spawn(Backend::Model(Model::new(model, 5).unwrap())),
    }
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 4,
        hidden_dim: 16,
        layers: 1,
        heads: 2,
        mlp_ratio: 2,
        freq_dim: 8,
        diffusion_steps: 20,
        ..Default::default()
    }
}

pub fn session(env: SessionEnv) -> Session {
    Session::new("test", env).unwrap()
}

pub fn action(dx: f64, dy: f64, dphi: f64) -> String {
    json!({"type": "action", "dx": dx, "dy": dy, "dphi": dphi}).to_string()
}

pub fn frames(msgs: &[ServerMessage]) -> Vec<(u64, ViewId, Stream, u32, Frame)> {
    msgs.iter()
        .filter_map(|m| match m {
            ServerMessage::Frame {
                tick,
                view,
                stream,
                k,
                payload,
                ..
            } => Some((*tick, *view, *stream, *k, decode_frame(payload).unwrap())),
            _ => None,
        })
        .collect()
}

pub fn error_field(msgs: &[ServerMessage]) -> Option<(String, Option<String>, Option<Value>)> {
    match msgs {
        [ServerMessage::Error {
            code, field, echo, ..
        }] => Some((serde_json::to_value(code).unwrap().as_str().unwrap().to_string(), field.clone(), echo.clone())),
        _ => None,
    }
}
