//! Synchronized multi-view episodes: generation, storage, splits and
//! training-sample construction.

mod format;
mod policy;
mod store;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XvwmError};
use crate::sim::{render, step, wrap_angle, Action, AgentState, Frame, RenderConfig, ViewId, World};

pub use format::{decode_episode, encode_episode, read_episode, write_episode, EPISODE_MAGIC, EPISODE_VERSION};
pub use policy::{Policy, PolicyConfig, PolicyKind};
pub use store::{generate_dataset, Dataset, DatasetConfig, IndexEntry, Manifest, Split, INDEX_FILE, MANIFEST_FILE};

/// Number of context frames fed to the model.
pub const CONTEXT_LEN: usize = 4;

/// Episode identity kept outside the binary payload (in the dataset index).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub id: u64,
    pub world_seed: u64,
    pub sky_id: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: u64,
    pub world_seed: u64,
    pub sky_id: u8,
    pub fps_x100: u16,
    pub size: usize,
    pub views: Vec<ViewId>,
    /// `actions[t]` is taken at frame `t`.
    pub actions: Vec<Action>,
    pub poses: Vec<AgentState>,
    /// `frames[i][t]` is view `views[i]` at time `t`.
    pub frames: Vec<Vec<Frame>>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn fps(&self) -> f64 {
        self.fps_x100 as f64 / 100.0
    }

    pub fn meta(&self) -> EpisodeMeta {
        EpisodeMeta {
            id: self.id,
            world_seed: self.world_seed,
            sky_id: self.sky_id,
        }
    }

    pub fn has_view(&self, view: ViewId) -> bool {
        self.views.contains(&view)
    }

    pub fn frames_of(&self, view: ViewId) -> Result<&[Frame]> {
        self.views
            .iter()
            .position(|&v| v == view)
            .map(|i| self.frames[i].as_slice())
            .ok_or_else(|| XvwmError::Usage(format!("episode {} has no {view} view", self.id)))
    }

    pub fn frame(&self, view: ViewId, t: usize) -> Result<&Frame> {
        let seq = self.frames_of(view)?;
        seq.get(t)
            .ok_or_else(|| XvwmError::Range(format!("frame {t} outside episode of length {}", seq.len())))
    }

    /// Drop every view not in `keep`.
    pub fn retain_views(&mut self, keep: &[ViewId]) {
        let mut i = 0;
        while i < self.views.len() {
            if keep.contains(&self.views[i]) {
                i += 1;
            } else {
                self.views.remove(i);
                self.frames.remove(i);
            }
        }
    }

    /// Replay the stored actions; returns the first index whose successor
    /// pose does not match.
    pub fn replay_mismatch(&self, world: &World) -> Option<usize> {
        (0..self.len().saturating_sub(1)).find(|&t| {
            snap_pose(step(world, &self.poses[t], &self.actions[t])) != self.poses[t + 1]
        })
    }
}

/// Round a pose to the stored `f32` precision with yaw kept in `[0, 2π)`.
pub fn snap_pose(s: AgentState) -> AgentState {
    let tau = std::f32::consts::TAU;
    let mut yaw = (s.yaw as f32).rem_euclid(tau);
    if yaw >= tau {
        yaw = 0.0;
    }
    AgentState {
        x: s.x as f32 as f64,
        y: s.y as f32 as f64,
        yaw: yaw as f64,
    }
}

pub fn snap_action(a: Action) -> Action {
    a.to_f32_precision()
}

/// Roll out `policy_cfg` in `world` and render every view at every frame.
///
/// Poses and actions are rounded to `f32` as they are produced, so the stored
/// sequence replays exactly.
pub fn generate_episode(
    world: &World,
    policy_cfg: &PolicyConfig,
    rcfg: &RenderConfig,
    views: &[ViewId],
    duration_s: f64,
    fps: f64,
    seed: u64,
) -> Result<Episode> {
    let t_len = (duration_s * fps).round();
    if !(t_len >= 8.0) || t_len > u32::MAX as f64 {
        return Err(XvwmError::Config(format!(
            "duration_s * fps must be at least 8 frames, got {duration_s} * {fps}"
        )));
    }
    let fps_x100 = (fps * 100.0).round();
    if !(1.0..=u16::MAX as f64).contains(&fps_x100) {
        return Err(XvwmError::Config(format!("fps {fps} not representable")));
    }
    if views.is_empty() {
        return Err(XvwmError::Config("episode needs at least one view".into()));
    }
    let t_len = t_len as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = Policy::new(policy_cfg.clone());
    let mut state = snap_pose(world.random_free_pose(&mut rng));
    let mut actions = Vec::with_capacity(t_len);
    let mut poses = Vec::with_capacity(t_len);
    let mut frames: Vec<Vec<Frame>> = views.iter().map(|_| Vec::with_capacity(t_len)).collect();
    for _ in 0..t_len {
        for (i, &v) in views.iter().enumerate() {
            frames[i].push(render(world, &state, v, rcfg));
        }
        let action = snap_action(policy.act(world, &state, &mut rng));
        poses.push(state);
        actions.push(action);
        state = snap_pose(step(world, &state, &action));
    }
    Ok(Episode {
        id: seed,
        world_seed: world.map_id,
        sky_id: world.sky_id,
        fps_x100: fps_x100 as u16,
        size: rcfg.size,
        views: views.to_vec(),
        actions,
        poses,
        frames,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub train: Vec<u64>,
    pub test: Vec<u64>,
    pub seed: u64,
}

/// Deterministic shuffle-and-cut split; `ratio` is the train fraction.
pub fn make_split(ids: &[u64], ratio: f64, seed: u64) -> Result<SplitIndex> {
    if ids.len() < 10 {
        return Err(XvwmError::Config(format!(
            "need at least 10 episodes to split, got {}",
            ids.len()
        )));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(XvwmError::Config(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(XvwmError::Config("duplicate episode ids".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let n_test = ((1.0 - ratio) * sorted.len() as f64).round() as usize;
    let n_test = n_test.clamp(1, sorted.len() - 1);
    let mut test = sorted[..n_test].to_vec();
    let mut train = sorted[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok(SplitIndex { train, test, seed })
}

/// Net motion between two poses, expressed in the frame of the first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CumAction {
    pub dx: f64,
    pub dy: f64,
    /// Wrapped to `(-π, π]`.
    pub dphi: f64,
}

impl CumAction {
    pub fn between(from: &AgentState, to: &AgentState) -> Self {
        let (c, s) = (from.yaw.cos(), from.yaw.sin());
        let (wx, wy) = (to.x - from.x, to.y - from.y);
        Self {
            dx: c * wx + s * wy,
            dy: -s * wx + c * wy,
            dphi: wrap_angle(to.yaw - from.yaw),
        }
    }

    /// Apply `self` then `next` (given in the frame reached after `self`).
    /// Displacement one action commands when nothing blocks it.
    pub fn of_action(a: &Action) -> Self {
        let (c, s) = (a.dphi.cos(), a.dphi.sin());
        Self {
            dx: c * a.dx - s * a.dy,
            dy: s * a.dx + c * a.dy,
            dphi: wrap_angle(a.dphi),
        }
    }

    pub fn compose(&self, next: &CumAction) -> CumAction {
        let (c, s) = (self.dphi.cos(), self.dphi.sin());
        CumAction {
            dx: self.dx + c * next.dx - s * next.dy,
            dy: self.dy + s * next.dx + c * next.dy,
            dphi: wrap_angle(self.dphi + next.dphi),
        }
    }

    /// Pose reached by applying this displacement at `from`.
    pub fn apply(&self, from: &AgentState) -> AgentState {
        let (c, s) = (from.yaw.cos(), from.yaw.sin());
        AgentState::new(
            from.x + c * self.dx - s * self.dy,
            from.y + s * self.dx + c * self.dy,
            from.yaw + self.dphi,
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainingSample {
    /// Frames `t-3..=t` of `input_view`, oldest first.
    pub context: Vec<Frame>,
    pub input_view: ViewId,
    pub output_view: ViewId,
    pub target: Frame,
    pub t: usize,
    pub k: i64,
    pub cum_action: CumAction,
    /// `k / fps` in seconds, signed.
    pub rel_time: f64,
}

/// Check the anchor/offset preconditions shared by all sample builders.
pub fn check_anchor(len: usize, t: usize, input_view: ViewId, output_view: ViewId, k: i64) -> Result<()> {
    if t < CONTEXT_LEN - 1 || t >= len {
        return Err(XvwmError::Range(format!(
            "anchor t={t} outside [{}, {len})",
            CONTEXT_LEN - 1
        )));
    }
    let target = t as i64 + k;
    if target < 0 || target >= len as i64 {
        return Err(XvwmError::Range(format!(
            "target t+k={target} outside [0, {len})"
        )));
    }
    if k == 0 && input_view == output_view {
        return Err(XvwmError::Range("k=0 requires distinct input and output views".into()));
    }
    Ok(())
}

pub fn make_sample(
    ep: &Episode,
    t: usize,
    input_view: ViewId,
    output_view: ViewId,
    k: i64,
) -> Result<TrainingSample> {
    check_anchor(ep.len(), t, input_view, output_view, k)?;
    let ctx = ep.frames_of(input_view)?;
    let target_t = (t as i64 + k) as usize;
    Ok(TrainingSample {
        context: ctx[t + 1 - CONTEXT_LEN..=t].to_vec(),
        input_view,
        output_view,
        target: ep.frame(output_view, target_t)?.clone(),
        t,
        k,
        cum_action: CumAction::between(&ep.poses[t], &ep.poses[target_t]),
        rel_time: k as f64 / ep.fps(),
    })
}
