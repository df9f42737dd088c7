//! One operator session: a private simulator, per-view context rings and
//! the imagination requests derived from them.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use xvwm_core::dataset::{CumAction, CONTEXT_LEN};
use xvwm_core::sim::{project_to_bev, render, step, Action, AgentState, Frame, RenderConfig, ViewId, World};

use crate::error::Result;
use crate::protocol::{
    encode_frame, parse_client, ClientMessage, ErrorCode, ParseError, Pose, ServerMessage, Stream, ENCODING,
    PROTOCOL_VERSION,
};
use crate::worker::{ImagineRequest, Worker};

/// Settings shared by every session of one server.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionConfig {
    pub fps: f64,
    pub live_ddim_steps: usize,
    pub whatif_ddim_steps: usize,
    /// Longest `whatif` preview, in ticks.
    pub max_horizon: usize,
    pub steer_view: ViewId,
    pub imagined_views: Vec<ViewId>,
    /// Seed of the first episode; `reset` replaces it.
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            fps: 5.0,
            live_ddim_steps: 10,
            whatif_ddim_steps: 20,
            max_horizon: 25,
            steer_view: ViewId::Ego,
            imagined_views: vec![ViewId::Bev],
            seed: 0,
        }
    }
}

/// Everything a session needs that outlives it.
#[derive(Clone)]
pub struct SessionEnv {
    pub config: SessionConfig,
    pub world: Arc<World>,
    pub render: RenderConfig,
    pub checkpoint_id: String,
    pub worker: Worker,
}

pub struct Session {
    id: String,
    env: SessionEnv,
    state: AgentState,
    /// Last `CONTEXT_LEN` ground-truth frames for every producible view.
    rings: BTreeMap<ViewId, VecDeque<Frame>>,
    steer_view: ViewId,
    imagined_views: Vec<ViewId>,
    /// Action of the latest tick; live imagination assumes it is held.
    held: Action,
    seed: u64,
    tick: u64,
}

/// Fold seed, tick, view and horizon into one sample seed.
fn sample_seed(seed: u64, tick: u64, view: ViewId, k: u32, stream: Stream) -> u64 {
    let mut z = seed
        ^ tick.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ ((k as u64) << 40)
        ^ ((view.code() as u64) << 56)
        ^ ((stream as u64) << 60);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn error(tick: u64, code: ErrorCode, message: impl Into<String>, field: Option<&str>, echo: Option<Value>) -> ServerMessage {
    ServerMessage::Error {
        tick,
        code,
        message: message.into(),
        field: field.map(str::to_string),
        echo,
    }
}

impl Session {
    pub fn new(id: impl Into<String>, env: SessionEnv) -> std::result::Result<Self, String> {
        let views = env.worker.views();
        if env.worker.image_size() != env.render.size {
            return Err(format!(
                "renderer produces {} px frames, backend expects {}",
                env.render.size,
                env.worker.image_size()
            ));
        }
        if !views.contains(&env.config.steer_view) {
            return Err(format!("steer view {} not served by the backend", env.config.steer_view));
        }
        if let Some(v) = env.config.imagined_views.iter().find(|v| !views.contains(v)) {
            return Err(format!("imagined view {v} not served by the backend"));
        }
        if !(env.config.fps > 0.0) || env.config.max_horizon == 0 {
            return Err("fps and max_horizon must be positive".into());
        }
        let mut s = Self {
            id: id.into(),
            steer_view: env.config.steer_view,
            imagined_views: env.config.imagined_views.clone(),
            seed: env.config.seed,
            state: AgentState::new(0.0, 0.0, 0.0),
            rings: BTreeMap::new(),
            held: Action::default(),
            tick: 0,
            env,
        };
        let start = s.spawn_pose(s.seed);
        s.restart(start);
        Ok(s)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn state(&self) -> AgentState {
        self.state
    }

    pub fn steer_view(&self) -> ViewId {
        self.steer_view
    }

    /// Context window the model sees for `view`, oldest first.
    pub fn context(&self, view: ViewId) -> Option<Vec<Frame>> {
        self.rings.get(&view).map(|r| r.iter().cloned().collect())
    }

    pub fn hello(&self) -> ServerMessage {
        ServerMessage::Hello {
            tick: self.tick,
            protocol_version: PROTOCOL_VERSION,
            session_id: self.id.clone(),
            checkpoint: self.env.checkpoint_id.clone(),
            views: self.env.worker.views().to_vec(),
            steer_view: self.steer_view,
            imagined_views: self.imagined_views.clone(),
            image_size: self.env.render.size,
            fps: self.env.config.fps,
            max_horizon: self.env.config.max_horizon,
        }
    }

    fn spawn_pose(&self, seed: u64) -> AgentState {
        self.env.world.random_free_pose(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Place the agent and fill every ring with the standing-still history.
    fn restart(&mut self, pose: AgentState) {
        self.state = pose;
        self.held = Action::default();
        self.rings.clear();
        for &v in self.env.worker.views() {
            let f = render(&self.env.world, &pose, v, &self.env.render);
            self.rings.insert(v, std::iter::repeat(f).take(CONTEXT_LEN).collect());
        }
    }

    /// Advance the real environment by one action.
    fn step(&mut self, action: Action) {
        self.state = step(&self.env.world, &self.state, &action);
        self.held = action;
        self.tick += 1;
        for (&v, ring) in self.rings.iter_mut() {
            ring.pop_front();
            ring.push_back(render(&self.env.world, &self.state, v, &self.env.render));
        }
    }

    fn check_action(&self, a: &Action, prefix: &str) -> std::result::Result<(), ParseError> {
        let w = &self.env.world;
        let checks = [("dx", a.dx, w.max_step), ("dy", a.dy, w.max_step), ("dphi", a.dphi, w.max_turn)];
        for (name, value, bound) in checks {
            if value.abs() > bound {
                return Err(ParseError {
                    field: Some(format!("{prefix}{name}")),
                    echo: Some(Value::from(value)),
                    message: format!("`{name}` must lie in [-{bound}, {bound}]"),
                });
            }
        }
        Ok(())
    }

    fn check_view(&self, v: ViewId, field: &str) -> std::result::Result<(), ServerMessage> {
        if self.env.worker.views().contains(&v) {
            Ok(())
        } else {
            Err(error(
                self.tick,
                ErrorCode::View,
                format!(
                    "view {v} is not in the model's view set ({})",
                    self.env.worker.views().iter().map(|v| v.name()).collect::<Vec<_>>().join(", ")
                ),
                Some(field),
                Some(Value::from(v.name())),
            ))
        }
    }

    fn parse_error(&self, e: ParseError) -> ServerMessage {
        error(self.tick, ErrorCode::Protocol, e.message, e.field.as_deref(), e.echo)
    }

    fn internal(&self, e: crate::error::ServeError) -> ServerMessage {
        error(self.tick, ErrorCode::Internal, e.to_string(), None, None)
    }

    /// Handle one raw text message.
    pub async fn handle_text(&mut self, text: &str) -> Vec<ServerMessage> {
        match parse_client(text) {
            Ok(msg) => self.handle(msg).await,
            Err(e) => vec![self.parse_error(e)],
        }
    }

    pub async fn handle(&mut self, msg: ClientMessage) -> Vec<ServerMessage> {
        match msg {
            ClientMessage::Hello { protocol_version } => {
                if protocol_version != PROTOCOL_VERSION {
                    return vec![error(
                        self.tick,
                        ErrorCode::Version,
                        format!("server speaks protocol {PROTOCOL_VERSION}"),
                        Some("protocol_version"),
                        Some(Value::from(protocol_version)),
                    )];
                }
                vec![self.hello()]
            }
            ClientMessage::Configure {
                steer_view,
                imagined_views,
                checkpoint,
            } => self.configure(steer_view, imagined_views, checkpoint),
            ClientMessage::Action(a) => {
                if let Err(e) = self.check_action(&a, "") {
                    return vec![self.parse_error(e)];
                }
                self.step(a);
                self.emit_tick().await
            }
            ClientMessage::Reset { seed, pose } => {
                let pose = match pose {
                    Some(p) if !self.env.world.is_free(&p) => {
                        return vec![error(
                            self.tick,
                            ErrorCode::Protocol,
                            "pose is not free space inside the arena",
                            Some("pose"),
                            serde_json::to_value(Pose::from(p)).ok(),
                        )]
                    }
                    Some(p) => p,
                    None => self.spawn_pose(seed),
                };
                self.seed = seed;
                self.tick += 1;
                self.restart(pose);
                let mut out = vec![ServerMessage::Reset {
                    tick: self.tick,
                    seed,
                    pose: pose.into(),
                }];
                out.extend(self.emit_tick().await);
                out
            }
            ClientMessage::Whatif {
                actions,
                view,
                horizon,
            } => self.whatif(actions, view, horizon).await,
        }
    }

    fn configure(
        &mut self,
        steer_view: Option<ViewId>,
        imagined_views: Option<Vec<ViewId>>,
        checkpoint: Option<String>,
    ) -> Vec<ServerMessage> {
        if let Some(c) = &checkpoint {
            if *c != self.env.checkpoint_id {
                return vec![error(
                    self.tick,
                    ErrorCode::Checkpoint,
                    format!("loaded checkpoint is {}", self.env.checkpoint_id),
                    Some("checkpoint"),
                    Some(Value::from(c.clone())),
                )];
            }
        }
        if let Some(v) = steer_view {
            if let Err(e) = self.check_view(v, "steer_view") {
                return vec![e];
            }
        }
        if let Some(vs) = &imagined_views {
            for (i, &v) in vs.iter().enumerate() {
                if let Err(e) = self.check_view(v, &format!("imagined_views[{i}]")) {
                    return vec![e];
                }
            }
        }
        if let Some(v) = steer_view {
            self.steer_view = v;
        }
        if let Some(vs) = imagined_views {
            self.imagined_views.clear();
            for v in vs {
                if !self.imagined_views.contains(&v) {
                    self.imagined_views.push(v);
                }
            }
        }
        vec![ServerMessage::Configure {
            tick: self.tick,
            steer_view: self.steer_view,
            imagined_views: self.imagined_views.clone(),
            checkpoint: self.env.checkpoint_id.clone(),
        }]
    }

    fn frame_message(&self, frame: &Frame, view: ViewId, stream: Stream, k: u32) -> Result<ServerMessage> {
        let truth = stream == Stream::Truth;
        let bev_px = if truth {
            project_to_bev(&self.env.world, &self.env.render, self.state.x, self.state.y)
                .ok()
                .map(|(u, v)| [u, v])
        } else {
            None
        };
        Ok(ServerMessage::Frame {
            tick: self.tick,
            view,
            stream,
            encoding: ENCODING.into(),
            payload: encode_frame(frame)?,
            k,
            pose: truth.then(|| self.state.into()),
            bev_px,
        })
    }

    fn request(&self, view: ViewId, k: u32, cum: CumAction, target: AgentState, stream: Stream) -> ImagineRequest {
        ImagineRequest {
            context: self.rings[&self.steer_view].iter().cloned().collect(),
            input_view: self.steer_view,
            output_view: view,
            rel_time: k as f64 / self.env.config.fps,
            cum_action: cum,
            target_pose: target,
            world: self.env.world.clone(),
            seed: sample_seed(self.seed, self.tick, view, k, stream),
        }
    }

    /// Ground truth for the steered view plus one k=1 prediction per imagined view.
    async fn emit_tick(&mut self) -> Vec<ServerMessage> {
        let truth = self.rings[&self.steer_view].back().cloned().expect("rings are full");
        let mut out = match self.frame_message(&truth, self.steer_view, Stream::Truth, 0) {
            Ok(m) => vec![m],
            Err(e) => return vec![self.internal(e)],
        };
        if self.imagined_views.is_empty() {
            return out;
        }
        let cum = CumAction::of_action(&self.held);
        let next = step(&self.env.world, &self.state, &self.held);
        let reqs: Vec<ImagineRequest> = self
            .imagined_views
            .iter()
            .map(|&v| self.request(v, 1, cum, next, Stream::Imagined))
            .collect();
        let frames = match self.env.worker.imagine(reqs, self.env.config.live_ddim_steps).await {
            Ok(f) => f,
            Err(e) => return vec![self.internal(e)],
        };
        for (f, &v) in frames.iter().zip(&self.imagined_views) {
            match self.frame_message(f, v, Stream::Imagined, 1) {
                Ok(m) => out.push(m),
                Err(e) => return vec![self.internal(e)],
            }
        }
        out
    }

    /// Preview `horizon` ticks of `actions` (zero-padded) without touching the real state.
    async fn whatif(&mut self, actions: Vec<Action>, view: ViewId, horizon: Option<usize>) -> Vec<ServerMessage> {
        if let Err(e) = self.check_view(view, "view") {
            return vec![e];
        }
        let max = self.env.config.max_horizon;
        let h = horizon.unwrap_or(actions.len().max(1));
        if h == 0 || h > max {
            return vec![error(
                self.tick,
                ErrorCode::Protocol,
                format!("`horizon` must lie in 1..={max}"),
                Some("horizon"),
                Some(Value::from(h)),
            )];
        }
        if actions.len() > h {
            return vec![error(
                self.tick,
                ErrorCode::Protocol,
                format!("{} actions exceed horizon {h}", actions.len()),
                Some("actions"),
                Some(Value::from(actions.len())),
            )];
        }
        for (i, a) in actions.iter().enumerate() {
            if let Err(e) = self.check_action(a, &format!("actions[{i}].")) {
                return vec![self.parse_error(e)];
            }
        }
        let mut cum = CumAction::default();
        let mut pose = self.state;
        let mut reqs = Vec::with_capacity(h);
        for j in 0..h {
            let a = actions.get(j).copied().unwrap_or_default();
            cum = cum.compose(&CumAction::of_action(&a));
            pose = step(&self.env.world, &pose, &a);
            reqs.push(self.request(view, j as u32 + 1, cum, pose, Stream::Whatif));
        }
        let frames = match self.env.worker.imagine(reqs, self.env.config.whatif_ddim_steps).await {
            Ok(f) => f,
            Err(e) => return vec![self.internal(e)],
        };
        let mut out = Vec::with_capacity(h);
        for (j, f) in frames.iter().enumerate() {
            match self.frame_message(f, view, Stream::Whatif, j as u32 + 1) {
                Ok(m) => out.push(m),
                Err(e) => return vec![self.internal(e)],
            }
        }
        out
    }
}
