//! Arena layout and agent dynamics.

use std::f64::consts::{PI, TAU};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::palette::{LandmarkShape, LANDMARK_COLORS, NUM_SKIES, NUM_WALL_TEXTURES};
use super::{Action, AgentState};
use crate::error::{Result, XvwmError};

/// Half-width of the agent's square collision box.
pub const AGENT_RADIUS: f64 = 0.2;
const SUBSTEP: f64 = 0.25;
const RUN_LENGTH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Arena side in cells, border walls included.
    pub arena_cells: usize,
    /// Side of one cell in world units.
    pub cell_size: f64,
    pub num_blocks: usize,
    pub num_landmarks: usize,
    pub max_step: f64,
    pub max_turn: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            arena_cells: 16,
            cell_size: 1.0,
            num_blocks: 6,
            num_landmarks: 6,
            max_step: 1.0,
            max_turn: PI / 4.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.arena_cells < 8 {
            return Err(XvwmError::Config(format!(
                "world.arena_cells must be at least 8, got {}",
                self.arena_cells
            )));
        }
        if self.arena_cells > 4096 {
            return Err(XvwmError::Config(format!(
                "world.arena_cells too large: {}",
                self.arena_cells
            )));
        }
        if !(self.cell_size.is_finite() && self.cell_size > 0.0) {
            return Err(XvwmError::Config(format!(
                "world.cell_size must be positive, got {}",
                self.cell_size
            )));
        }
        if !(self.max_step.is_finite() && self.max_step > 0.0) {
            return Err(XvwmError::Config("world.max_step must be positive".into()));
        }
        if !(self.max_turn > 0.0 && self.max_turn <= PI) {
            return Err(XvwmError::Config(
                "world.max_turn must lie in (0, pi]".into(),
            ));
        }
        if self.num_landmarks > LANDMARK_COLORS.len() {
            return Err(XvwmError::Config(format!(
                "world.num_landmarks must be at most {}",
                LANDMARK_COLORS.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub x: f64,
    pub y: f64,
    pub color: [u8; 3],
    pub shape: LandmarkShape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub map_id: u64,
    pub cells: usize,
    pub cell_size: f64,
    /// Row-major `cells x cells`; index `cy * cells + cx`.
    pub occupancy: Vec<bool>,
    /// Texture id per cell; meaningful only for wall cells.
    pub wall_texture_ids: Vec<u8>,
    pub landmarks: Vec<Landmark>,
    pub sky_id: u8,
    pub max_step: f64,
    pub max_turn: f64,
}

/// Build the arena for `seed`. Layout and sky are both drawn from the seed.
pub fn make_world(seed: u64, config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.arena_cells;
    let mut occupancy = vec![false; n * n];
    let mut texture = vec![0u8; n * n];

    let mut palette: Vec<u8> = (0..NUM_WALL_TEXTURES as u8).collect();
    palette.shuffle(&mut rng);

    // Perimeter in clockwise order, cut into runs with distinct neighbors.
    let perimeter = perimeter_cells(n);
    let runs = perimeter.len().div_ceil(RUN_LENGTH);
    let mut run_tex: Vec<u8> = (0..runs).map(|i| palette[i % palette.len()]).collect();
    if runs > 1 && run_tex[runs - 1] == run_tex[0] {
        let prev = run_tex[runs - 2];
        run_tex[runs - 1] = *palette
            .iter()
            .find(|&&t| t != run_tex[0] && t != prev)
            .expect("palette has at least three textures");
    }
    for (i, &(cx, cy)) in perimeter.iter().enumerate() {
        occupancy[cy * n + cx] = true;
        texture[cy * n + cx] = run_tex[i / RUN_LENGTH];
    }

    // Interior blocks keep a one-cell gap to the border and to each other so
    // free space stays connected.
    let mut reserved = vec![false; n * n];
    for cy in 0..n {
        for cx in 0..n {
            if cx <= 1 || cy <= 1 || cx >= n - 2 || cy >= n - 2 {
                reserved[cy * n + cx] = true;
            }
        }
    }
    let mut placed = 0;
    let mut attempts = 0;
    while placed < config.num_blocks && attempts < 200 * (config.num_blocks + 1) {
        attempts += 1;
        let w = rng.gen_range(1..=2usize);
        let h = rng.gen_range(1..=2usize);
        if n < 5 + w.max(h) {
            break;
        }
        let x0 = rng.gen_range(2..=n - 3 - w);
        let y0 = rng.gen_range(2..=n - 3 - h);
        let tex = rng.gen_range(0..NUM_WALL_TEXTURES as u8);
        let fits = (y0..y0 + h).all(|y| (x0..x0 + w).all(|x| !reserved[y * n + x]));
        if !fits {
            continue;
        }
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                occupancy[y * n + x] = true;
                texture[y * n + x] = tex;
            }
        }
        for y in y0 - 1..=y0 + h {
            for x in x0 - 1..=x0 + w {
                reserved[y * n + x] = true;
            }
        }
        placed += 1;
    }

    let mut free: Vec<(usize, usize)> = (1..n - 1)
        .flat_map(|cy| (1..n - 1).map(move |cx| (cx, cy)))
        .filter(|&(cx, cy)| !occupancy[cy * n + cx])
        .collect();
    free.shuffle(&mut rng);
    let mut colors = LANDMARK_COLORS.to_vec();
    colors.shuffle(&mut rng);
    let landmarks = free
        .iter()
        .take(config.num_landmarks)
        .zip(colors)
        .map(|(&(cx, cy), color)| Landmark {
            x: (cx as f64 + 0.5) * config.cell_size,
            y: (cy as f64 + 0.5) * config.cell_size,
            color,
            shape: LandmarkShape::ALL[rng.gen_range(0..LandmarkShape::ALL.len())],
        })
        .collect();

    let sky_id = rng.gen_range(0..NUM_SKIES as u8);
    Ok(World {
        map_id: seed,
        cells: n,
        cell_size: config.cell_size,
        occupancy,
        wall_texture_ids: texture,
        landmarks,
        sky_id,
        max_step: config.max_step,
        max_turn: config.max_turn,
    })
}

fn perimeter_cells(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(4 * (n - 1));
    for x in 0..n - 1 {
        out.push((x, 0));
    }
    for y in 0..n - 1 {
        out.push((n - 1, y));
    }
    for x in (1..n).rev() {
        out.push((x, n - 1));
    }
    for y in (1..n).rev() {
        out.push((0, y));
    }
    out
}

impl World {
    /// Arena side in world units.
    pub fn side(&self) -> f64 {
        self.cells as f64 * self.cell_size
    }

    pub fn with_sky(&self, sky_id: u8) -> World {
        World {
            sky_id: sky_id % NUM_SKIES as u8,
            ..self.clone()
        }
    }

    /// Whether cell `(cx, cy)` is a wall. Cells outside the grid count as walls.
    pub fn is_wall(&self, cx: i64, cy: i64) -> bool {
        if cx < 0 || cy < 0 || cx >= self.cells as i64 || cy >= self.cells as i64 {
            return true;
        }
        self.occupancy[cy as usize * self.cells + cx as usize]
    }

    pub fn texture_at(&self, cx: i64, cy: i64) -> u8 {
        if cx < 0 || cy < 0 || cx >= self.cells as i64 || cy >= self.cells as i64 {
            return 0;
        }
        self.wall_texture_ids[cy as usize * self.cells + cx as usize]
    }

    /// Whether the point lies inside a wall cell.
    pub fn point_in_wall(&self, x: f64, y: f64) -> bool {
        self.is_wall(
            (x / self.cell_size).floor() as i64,
            (y / self.cell_size).floor() as i64,
        )
    }

    /// Whether the agent's collision box centered at `(x, y)` touches a wall.
    pub fn collides(&self, x: f64, y: f64) -> bool {
        let r = AGENT_RADIUS;
        let cs = self.cell_size;
        let x0 = ((x - r) / cs).floor() as i64;
        let x1 = ((x + r) / cs).floor() as i64;
        let y0 = ((y - r) / cs).floor() as i64;
        let y1 = ((y + r) / cs).floor() as i64;
        (y0..=y1).any(|cy| (x0..=x1).any(|cx| self.is_wall(cx, cy)))
    }

    pub fn is_free(&self, state: &AgentState) -> bool {
        !self.collides(state.x, state.y)
    }

    /// Uniformly random collision-free pose.
    pub fn random_free_pose<R: Rng + ?Sized>(&self, rng: &mut R) -> AgentState {
        let side = self.side();
        loop {
            let x = rng.gen_range(0.0..side);
            let y = rng.gen_range(0.0..side);
            let yaw = rng.gen_range(0.0..TAU);
            if !self.collides(x, y) {
                return AgentState::new(x, y, yaw);
            }
        }
    }

    /// Distinct texture ids used by wall cells.
    pub fn distinct_wall_textures(&self) -> usize {
        let mut seen = [false; 256];
        for (i, &w) in self.occupancy.iter().enumerate() {
            if w {
                seen[self.wall_texture_ids[i] as usize] = true;
            }
        }
        seen.iter().filter(|&&s| s).count()
    }

    /// Texture ids of the perimeter runs in clockwise order.
    pub fn perimeter_runs(&self) -> Vec<u8> {
        perimeter_cells(self.cells)
            .chunks(RUN_LENGTH)
            .map(|run| self.texture_at(run[0].0 as i64, run[0].1 as i64))
            .collect()
    }
}

/// Advance the agent by one action.
///
/// Panics if the action exceeds the world's bounds; callers clamp first.
pub fn step(world: &World, state: &AgentState, action: &Action) -> AgentState {
    assert!(
        action.dx.abs() <= world.max_step
            && action.dy.abs() <= world.max_step
            && action.dphi.abs() <= world.max_turn,
        "action {action:?} exceeds bounds"
    );
    let yaw = (state.yaw + action.dphi).rem_euclid(TAU);
    let (c, s) = (yaw.cos(), yaw.sin());
    let total_x = action.dx * c - action.dy * s;
    let total_y = action.dx * s + action.dy * c;
    if total_x == 0.0 && total_y == 0.0 {
        return AgentState {
            x: state.x,
            y: state.y,
            yaw,
        };
    }

    let n = (total_x.abs().max(total_y.abs()) / SUBSTEP).ceil().max(1.0) as usize;
    let (sx, sy) = (total_x / n as f64, total_y / n as f64);
    let (mut x, mut y) = (state.x, state.y);
    let (mut blocked_x, mut blocked_y) = (false, false);
    for _ in 0..n {
        if !blocked_x {
            if world.collides(x + sx, y) {
                blocked_x = true;
            } else {
                x += sx;
            }
        }
        if !blocked_y {
            if world.collides(x, y + sy) {
                blocked_y = true;
            } else {
                y += sy;
            }
        }
    }
    // An axis that never hit a wall lands exactly on the commanded target.
    if !blocked_x && !world.collides(state.x + total_x, y) {
        x = state.x + total_x;
    }
    if !blocked_y && !world.collides(x, state.y + total_y) {
        y = state.y + total_y;
    }
    AgentState { x, y, yaw }
}
