//! Wire messages: one JSON object per text message, tagged by `type`.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use xvwm_core::sim::{Action, AgentState, Frame, ViewId};

use crate::error::{Result, ServeError};

pub const PROTOCOL_VERSION: u32 = 1;
pub const ENCODING: &str = "png-base64";

/// Which stream a frame belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    /// Rendered by the simulator for the steered view.
    Truth,
    /// Live model prediction one tick ahead.
    Imagined,
    /// Preview from a `whatif` request.
    Whatif,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl From<AgentState> for Pose {
    fn from(s: AgentState) -> Self {
        Self {
            x: s.x,
            y: s.y,
            yaw: s.yaw,
        }
    }
}

impl From<Pose> for AgentState {
    fn from(p: Pose) -> Self {
        AgentState::new(p.x, p.y, p.yaw)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// Malformed JSON, unknown type, bad or missing field.
    Protocol,
    /// A view outside the loaded model's view set.
    View,
    Checkpoint,
    Version,
    Internal,
}

/// Messages the server sends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        tick: u64,
        protocol_version: u32,
        session_id: String,
        checkpoint: String,
        views: Vec<ViewId>,
        steer_view: ViewId,
        imagined_views: Vec<ViewId>,
        image_size: usize,
        fps: f64,
        max_horizon: usize,
    },
    Configure {
        tick: u64,
        steer_view: ViewId,
        imagined_views: Vec<ViewId>,
        checkpoint: String,
    },
    Reset {
        tick: u64,
        seed: u64,
        pose: Pose,
    },
    Frame {
        tick: u64,
        view: ViewId,
        stream: Stream,
        encoding: String,
        payload: String,
        /// Ticks ahead of `tick` the frame depicts.
        k: u32,
        /// True pose, on truth frames only.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pose: Option<Pose>,
        /// True pose projected to top-down pixels, on truth frames only.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bev_px: Option<[f64; 2]>,
    },
    Error {
        tick: u64,
        code: ErrorCode,
        message: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        field: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        echo: Option<Value>,
    },
}

impl ServerMessage {
    pub fn tick(&self) -> u64 {
        match self {
            ServerMessage::Hello { tick, .. }
            | ServerMessage::Configure { tick, .. }
            | ServerMessage::Reset { tick, .. }
            | ServerMessage::Frame { tick, .. }
            | ServerMessage::Error { tick, .. } => *tick,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}

/// Messages the client sends, after validation.
#[derive(Clone, Debug, PartialEq)]
pub enum ClientMessage {
    Hello {
        protocol_version: u32,
    },
    Configure {
        steer_view: Option<ViewId>,
        imagined_views: Option<Vec<ViewId>>,
        checkpoint: Option<String>,
    },
    Action(Action),
    Whatif {
        actions: Vec<Action>,
        view: ViewId,
        horizon: Option<usize>,
    },
    Reset {
        seed: u64,
        pose: Option<AgentState>,
    },
}

/// A rejected client message, naming the offending field.
#[derive(Clone, Debug, PartialEq)]
pub struct ParseError {
    pub field: Option<String>,
    pub echo: Option<Value>,
    pub message: String,
}

impl ParseError {
    fn new(field: &str, echo: Option<&Value>, message: impl Into<String>) -> Self {
        Self {
            field: Some(field.to_string()),
            echo: echo.cloned(),
            message: message.into(),
        }
    }
}

struct Fields<'a> {
    obj: &'a Map<String, Value>,
}

impl<'a> Fields<'a> {
    fn allow(&self, known: &[&str]) -> std::result::Result<(), ParseError> {
        for (k, v) in self.obj {
            if k != "type" && k != "tick" && !known.contains(&k.as_str()) {
                return Err(ParseError::new(k, Some(v), format!("unknown field `{k}`")));
            }
        }
        Ok(())
    }

    fn get(&self, name: &str) -> Option<&'a Value> {
        self.obj.get(name).filter(|v| !v.is_null())
    }

    fn f64(&self, name: &str) -> std::result::Result<f64, ParseError> {
        let v = self
            .get(name)
            .ok_or_else(|| ParseError::new(name, None, format!("missing field `{name}`")))?;
        number(name, v)
    }

    fn u64_opt(&self, name: &str) -> std::result::Result<Option<u64>, ParseError> {
        self.get(name)
            .map(|v| {
                v.as_u64()
                    .ok_or_else(|| ParseError::new(name, Some(v), format!("`{name}` must be a non-negative integer")))
            })
            .transpose()
    }

    fn view_opt(&self, name: &str) -> std::result::Result<Option<ViewId>, ParseError> {
        self.get(name).map(|v| view(name, v)).transpose()
    }
}

fn number(name: &str, v: &Value) -> std::result::Result<f64, ParseError> {
    match v.as_f64() {
        Some(x) if x.is_finite() => Ok(x),
        _ => Err(ParseError::new(name, Some(v), format!("`{name}` must be a finite number"))),
    }
}

fn view(name: &str, v: &Value) -> std::result::Result<ViewId, ParseError> {
    v.as_str()
        .and_then(|s| s.parse::<ViewId>().ok())
        .ok_or_else(|| ParseError::new(name, Some(v), format!("`{name}` is not a view name")))
}

fn action(prefix: &str, v: &Value) -> std::result::Result<Action, ParseError> {
    let obj = v
        .as_object()
        .ok_or_else(|| ParseError::new(prefix, Some(v), format!("`{prefix}` must be an object")))?;
    let f = Fields { obj };
    for (k, val) in obj {
        if !["dx", "dy", "dphi"].contains(&k.as_str()) {
            return Err(ParseError::new(&format!("{prefix}.{k}"), Some(val), format!("unknown field `{k}`")));
        }
    }
    let get = |n: &str| {
        f.f64(n).map_err(|mut e| {
            e.field = Some(format!("{prefix}.{n}"));
            e
        })
    };
    Ok(Action::new(get("dx")?, get("dy")?, get("dphi")?))
}

/// Parse and validate one client text message.
pub fn parse_client(text: &str) -> std::result::Result<ClientMessage, ParseError> {
    let value: Value = serde_json::from_str(text).map_err(|e| ParseError {
        field: None,
        echo: None,
        message: format!("invalid JSON: {e}"),
    })?;
    let obj = value.as_object().ok_or_else(|| ParseError {
        field: None,
        echo: Some(value.clone()),
        message: "message must be a JSON object".into(),
    })?;
    let f = Fields { obj };
    let ty = f
        .get("type")
        .ok_or_else(|| ParseError::new("type", None, "missing field `type`"))?;
    match ty.as_str() {
        Some("hello") => {
            f.allow(&["protocol_version"])?;
            let v = f
                .u64_opt("protocol_version")?
                .ok_or_else(|| ParseError::new("protocol_version", None, "missing field `protocol_version`"))?;
            Ok(ClientMessage::Hello {
                protocol_version: u32::try_from(v).unwrap_or(u32::MAX),
            })
        }
        Some("configure") => {
            f.allow(&["steer_view", "imagined_views", "checkpoint"])?;
            let imagined_views = match f.get("imagined_views") {
                None => None,
                Some(Value::Array(items)) => Some(
                    items
                        .iter()
                        .enumerate()
                        .map(|(i, v)| view(&format!("imagined_views[{i}]"), v))
                        .collect::<std::result::Result<Vec<_>, _>>()?,
                ),
                Some(other) => {
                    return Err(ParseError::new("imagined_views", Some(other), "`imagined_views` must be an array"))
                }
            };
            let checkpoint = match f.get("checkpoint") {
                None => None,
                Some(Value::String(s)) => Some(s.clone()),
                Some(other) => return Err(ParseError::new("checkpoint", Some(other), "`checkpoint` must be a string")),
            };
            Ok(ClientMessage::Configure {
                steer_view: f.view_opt("steer_view")?,
                imagined_views,
                checkpoint,
            })
        }
        Some("action") => {
            f.allow(&["dx", "dy", "dphi"])?;
            Ok(ClientMessage::Action(Action::new(f.f64("dx")?, f.f64("dy")?, f.f64("dphi")?)))
        }
        Some("whatif") => {
            f.allow(&["actions", "view", "horizon"])?;
            let actions = match f.get("actions") {
                None => Vec::new(),
                Some(Value::Array(items)) => items
                    .iter()
                    .enumerate()
                    .map(|(i, v)| action(&format!("actions[{i}]"), v))
                    .collect::<std::result::Result<Vec<_>, _>>()?,
                Some(other) => return Err(ParseError::new("actions", Some(other), "`actions` must be an array")),
            };
            let view = f
                .view_opt("view")?
                .ok_or_else(|| ParseError::new("view", None, "missing field `view`"))?;
            let horizon = f.u64_opt("horizon")?.map(|h| h as usize);
            Ok(ClientMessage::Whatif {
                actions,
                view,
                horizon,
            })
        }
        Some("reset") => {
            f.allow(&["seed", "pose"])?;
            let seed = f
                .u64_opt("seed")?
                .ok_or_else(|| ParseError::new("seed", None, "missing field `seed`"))?;
            let pose = match f.get("pose") {
                None => None,
                Some(v @ Value::Object(o)) => {
                    let p = Fields { obj: o };
                    for (k, val) in o {
                        if !["x", "y", "yaw"].contains(&k.as_str()) {
                            return Err(ParseError::new(&format!("pose.{k}"), Some(val), format!("unknown field `{k}`")));
                        }
                    }
                    let get = |n: &str| {
                        p.f64(n).map_err(|mut e| {
                            e.field = Some(format!("pose.{n}"));
                            e.echo = e.echo.or_else(|| Some(v.clone()));
                            e
                        })
                    };
                    Some(AgentState::new(get("x")?, get("y")?, get("yaw")?))
                }
                Some(other) => return Err(ParseError::new("pose", Some(other), "`pose` must be an object")),
            };
            Ok(ClientMessage::Reset { seed, pose })
        }
        Some(other) if ["frame", "error"].contains(&other) => Err(ParseError::new(
            "type",
            Some(ty),
            format!("`{other}` messages are sent by the server only"),
        )),
        _ => Err(ParseError::new("type", Some(ty), "unknown message type")),
    }
}

/// PNG bytes of an RGB frame, base64 encoded.
pub fn encode_frame(frame: &Frame) -> Result<String> {
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, frame.width() as u32, frame.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| ServeError::Encoding(e.to_string()))?;
        w.write_image_data(frame.pixels())
            .map_err(|e| ServeError::Encoding(e.to_string()))?;
    }
    Ok(STANDARD.encode(bytes))
}

/// Inverse of [`encode_frame`].
pub fn decode_frame(payload: &str) -> Result<Frame> {
    let bytes = STANDARD
        .decode(payload)
        .map_err(|e| ServeError::Encoding(format!("base64: {e}")))?;
    let dec = png::Decoder::new(bytes.as_slice());
    let mut reader = dec.read_info().map_err(|e| ServeError::Encoding(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| ServeError::Encoding(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(ServeError::Encoding(format!(
            "expected 8-bit RGB, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok(Frame::new(info.width as usize, info.height as usize, buf)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let mut f = Frame::filled(16, [10, 20, 30]);
        f.set(3, 5, [255, 0, 7]);
        assert_eq!(decode_frame(&encode_frame(&f).unwrap()).unwrap(), f);
    }

    #[test]
    fn action_parses() {
        let m = parse_client(r#"{"type":"action","tick":3,"dx":0.5,"dy":0,"dphi":-0.1}"#).unwrap();
        assert_eq!(m, ClientMessage::Action(Action::new(0.5, 0.0, -0.1)));
    }

    #[test]
    fn offending_field_is_echoed() {
        let e = parse_client(r#"{"type":"action","dx":"far","dy":0,"dphi":0}"#).unwrap_err();
        assert_eq!(e.field.as_deref(), Some("dx"));
        assert_eq!(e.echo, Some(Value::String("far".into())));

        let e = parse_client(r#"{"type":"action","dx":0,"dy":0,"dphi":0,"speed":3}"#).unwrap_err();
        assert_eq!(e.field.as_deref(), Some("speed"));

        let e = parse_client(r#"{"type":"whatif","view":"bev","actions":[{"dx":0,"dy":0,"dphi":0},{"dx":1}]}"#)
            .unwrap_err();
        assert_eq!(e.field.as_deref(), Some("actions[1].dy"));

        let e = parse_client(r#"{"type":"configure","imagined_views":["bev","side"]}"#).unwrap_err();
        assert_eq!(e.field.as_deref(), Some("imagined_views[1]"));
        assert_eq!(e.echo, Some(Value::String("side".into())));

        let e = parse_client(r#"{"type":"teleport"}"#).unwrap_err();
        assert_eq!(e.field.as_deref(), Some("type"));

        let e = parse_client("not json").unwrap_err();
        assert_eq!(e.field, None);
    }

    #[test]
    fn server_messages_round_trip() {
        let m = ServerMessage::Frame {
            tick: 4,
            view: ViewId::Bev,
            stream: Stream::Imagined,
            encoding: ENCODING.into(),
            payload: "AA==".into(),
            k: 1,
            pose: None,
            bev_px: None,
        };
        let s = m.to_json();
        assert!(s.starts_with(r#"{"type":"frame","tick":4,"view":"bev","stream":"imagined""#), "{s}");
        assert_eq!(serde_json::from_str::<ServerMessage>(&s).unwrap(), m);
    }
}
