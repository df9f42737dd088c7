//! Scripted behavior policies that drive episode generation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::sim::{Action, AgentState, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    RandomWalk,
    Stationary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Mean forward displacement per frame, world units.
    pub mean_speed: f64,
    /// Fraction of the previous turn rate kept each frame.
    pub turn_momentum: f64,
    pub turn_noise: f64,
    /// Per-frame probability of starting a strafe burst.
    pub strafe_prob: f64,
    pub strafe_speed: f64,
    /// Distance ahead probed for walls.
    pub lookahead: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::RandomWalk,
            mean_speed: 0.3,
            turn_momentum: 0.8,
            turn_noise: 0.12,
            strafe_prob: 0.08,
            strafe_speed: 0.2,
            lookahead: 0.9,
        }
    }
}

/// Smoothed random walk with momentum on turning, occasional strafe bursts
/// and a reflex that turns away from walls ahead.
pub struct Policy {
    cfg: PolicyConfig,
    turn: f64,
    speed: f64,
    strafe: f64,
    strafe_left: u32,
    avoid_sign: f64,
}

impl Policy {
    pub fn new(cfg: PolicyConfig) -> Self {
        Self {
            speed: cfg.mean_speed,
            cfg,
            turn: 0.0,
            strafe: 0.0,
            strafe_left: 0,
            avoid_sign: 1.0,
        }
    }

    /// Next action, already clamped strictly inside the world's bounds.
    pub fn act<R: Rng + ?Sized>(&mut self, world: &World, state: &AgentState, rng: &mut R) -> Action {
        if self.cfg.kind == PolicyKind::Stationary {
            return Action::default();
        }
        let noise = Normal::new(0.0, self.cfg.turn_noise.max(1e-12)).expect("finite std");
        let max_turn = world.max_turn * 0.95;
        let max_step = world.max_step * 0.95;

        self.turn = self.cfg.turn_momentum * self.turn + noise.sample(rng);
        let speed_noise = Normal::new(0.0, 0.05).expect("finite std");
        self.speed = (0.9 * self.speed + 0.1 * self.cfg.mean_speed + speed_noise.sample(rng))
            .clamp(0.0, max_step);

        let (fx, fy) = state.forward();
        let probe = self.cfg.lookahead;
        let blocked = world.collides(state.x + fx * probe, state.y + fy * probe);
        let mut speed = self.speed;
        if blocked {
            if self.turn.abs() < 0.2 {
                self.avoid_sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            } else {
                self.avoid_sign = self.turn.signum();
            }
            self.turn = self.avoid_sign * max_turn;
            speed *= 0.2;
        }
        self.turn = self.turn.clamp(-max_turn, max_turn);

        if self.strafe_left == 0 && rng.gen_bool(self.cfg.strafe_prob.clamp(0.0, 1.0)) {
            self.strafe_left = rng.gen_range(2..=5);
            self.strafe = if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * self.cfg.strafe_speed;
        }
        let dy = if self.strafe_left > 0 {
            self.strafe_left -= 1;
            self.strafe.clamp(-max_step, max_step)
        } else {
            0.0
        };
        Action::new(speed, dy, self.turn)
    }
}
