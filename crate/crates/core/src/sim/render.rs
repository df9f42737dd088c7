//! Column raycaster for the perspective views and the top-down map.
//!
//! Image coordinates: `u` grows to the right, `v` grows downward. In the BEV
//! map `u` follows world +x and `v` follows world +y, and pixel `(i, j)`
//! covers the square `[i, i+1) x [j, j+1)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::palette::{
    LandmarkShape, BEV_FLOOR, BODY_HEAD, BODY_TORSO, BODY_VISOR, FLOOR_TONES, SKIES, WALL_TEXTURES,
};
use super::world::World;
use super::{wrap_angle, AgentState, Frame, ViewId};
use crate::error::{Result, XvwmError};

const LANDMARK_WIDTH: f64 = 0.5;
const LANDMARK_HEIGHT: f64 = 0.7;
const LANDMARK_BEV_SIZE: f64 = 0.6;
const BODY_WIDTH: f64 = 0.45;
const BODY_HEIGHT: f64 = 0.9;
const CAMERA_CLEARANCE: f64 = 0.1;
const SUN_ELEVATION: f64 = 0.35;
const SUN_RADIUS: f64 = 0.12;

/// Marker pixels carry `(255, q, q)` with `q = round(MARKER_RAMP * (1 - coverage))`.
pub const MARKER_RAMP: f64 = 80.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    /// Image side in pixels.
    pub size: usize,
    pub fov_deg: f64,
    pub wall_height: f64,
    pub ego_height: f64,
    pub os_back: f64,
    pub os_height: f64,
    pub os_tilt_deg: f64,
    pub front_ahead: f64,
    pub front_height: f64,
    pub front_tilt_deg: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            size: 64,
            fov_deg: 90.0,
            wall_height: 1.0,
            ego_height: 0.5,
            os_back: 1.5,
            os_height: 0.75,
            os_tilt_deg: 10.0,
            front_ahead: 2.0,
            front_height: 0.85,
            front_tilt_deg: 20.0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(16..=1024).contains(&self.size) {
            return Err(XvwmError::Config(format!(
                "render.size must lie in 16..=1024, got {}",
                self.size
            )));
        }
        if !(self.fov_deg > 10.0 && self.fov_deg < 170.0) {
            return Err(XvwmError::Config(format!(
                "render.fov_deg must lie in (10, 170), got {}",
                self.fov_deg
            )));
        }
        for (name, h) in [
            ("ego_height", self.ego_height),
            ("os_height", self.os_height),
            ("front_height", self.front_height),
        ] {
            if !(h > 0.0 && h < self.wall_height) {
                return Err(XvwmError::Config(format!(
                    "render.{name} must lie in (0, wall_height)"
                )));
            }
        }
        for (name, t) in [
            ("os_tilt_deg", self.os_tilt_deg),
            ("front_tilt_deg", self.front_tilt_deg),
        ] {
            if !(0.0..60.0).contains(&t) {
                return Err(XvwmError::Config(format!(
                    "render.{name} must lie in [0, 60)"
                )));
            }
        }
        if self.os_back <= 0.0 || self.front_ahead <= 0.0 {
            return Err(XvwmError::Config(
                "render camera offsets must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Long side of the BEV marker in pixels for an image of side `size`.
pub fn marker_length_px(size: usize) -> f64 {
    size as f64 * 17.0 / 224.0
}

/// World position to continuous BEV pixel coordinates.
pub fn project_to_bev(world: &World, rcfg: &RenderConfig, x: f64, y: f64) -> Result<(f64, f64)> {
    let side = world.side();
    if !(0.0..=side).contains(&x) || !(0.0..=side).contains(&y) {
        return Err(XvwmError::Domain(format!(
            "position ({x}, {y}) outside arena [0, {side}]"
        )));
    }
    let scale = rcfg.size as f64 / side;
    Ok((x * scale, y * scale))
}

pub fn render(world: &World, state: &AgentState, view: ViewId, rcfg: &RenderConfig) -> Frame {
    match view {
        ViewId::Ego => {
            let cam = Camera {
                x: state.x,
                y: state.y,
                yaw: state.yaw,
                height: rcfg.ego_height,
                tilt: 0.0,
            };
            render_perspective(world, &cam, rcfg, None)
        }
        ViewId::OverShoulder => {
            let (fx, fy) = state.forward();
            let d = pull_camera(world, state.x, state.y, -fx, -fy, rcfg.os_back);
            let cam = Camera {
                x: state.x - fx * d,
                y: state.y - fy * d,
                yaw: state.yaw,
                height: rcfg.os_height,
                tilt: rcfg.os_tilt_deg.to_radians(),
            };
            let body = Body {
                x: state.x,
                y: state.y,
                facing_camera: false,
            };
            render_perspective(world, &cam, rcfg, Some(body))
        }
        ViewId::Front => {
            let (fx, fy) = state.forward();
            let d = pull_camera(world, state.x, state.y, fx, fy, rcfg.front_ahead);
            let cam = Camera {
                x: state.x + fx * d,
                y: state.y + fy * d,
                yaw: state.yaw + PI,
                height: rcfg.front_height,
                tilt: rcfg.front_tilt_deg.to_radians(),
            };
            let body = Body {
                x: state.x,
                y: state.y,
                facing_camera: true,
            };
            render_perspective(world, &cam, rcfg, Some(body))
        }
        ViewId::Bev => render_bev(world, state, rcfg),
    }
}

struct Camera {
    x: f64,
    y: f64,
    yaw: f64,
    height: f64,
    tilt: f64,
}

struct Body {
    x: f64,
    y: f64,
    facing_camera: bool,
}

fn box_touches_wall(world: &World, x: f64, y: f64, r: f64) -> bool {
    let cs = world.cell_size;
    let x0 = ((x - r) / cs).floor() as i64;
    let x1 = ((x + r) / cs).floor() as i64;
    let y0 = ((y - r) / cs).floor() as i64;
    let y1 = ((y + r) / cs).floor() as i64;
    (y0..=y1).any(|cy| (x0..=x1).any(|cx| world.is_wall(cx, cy)))
}

/// Largest distance up to `dist` along `(dx, dy)` from the agent at which the
/// camera keeps clear of walls.
fn pull_camera(world: &World, ax: f64, ay: f64, dx: f64, dy: f64, dist: f64) -> f64 {
    const STEP: f64 = 0.02;
    let n = (dist / STEP).ceil() as usize;
    let mut best = 0.0;
    for i in 1..=n {
        let t = (i as f64 * STEP).min(dist);
        if box_touches_wall(world, ax + dx * t, ay + dy * t, CAMERA_CLEARANCE) {
            break;
        }
        best = t;
    }
    best
}

fn lerp(a: [u8; 3], b: [u8; 3], t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (a[c] as f64 + (b[c] as f64 - a[c] as f64) * t).round() as u8;
    }
    out
}

fn shade(c: [u8; 3], k: f64) -> [u8; 3] {
    [
        (c[0] as f64 * k).round() as u8,
        (c[1] as f64 * k).round() as u8,
        (c[2] as f64 * k).round() as u8,
    ]
}

struct Hit {
    perp: f64,
    texture: u8,
    u: f64,
    y_side: bool,
}

/// Grid traversal in cell units; `perp` is returned in world units.
fn cast_ray(world: &World, px: f64, py: f64, rx: f64, ry: f64) -> Hit {
    let cs = world.cell_size;
    let (px, py) = (px / cs, py / cs);
    let mut mx = px.floor() as i64;
    let mut my = py.floor() as i64;
    if world.is_wall(mx, my) {
        return Hit {
            perp: 1e-3,
            texture: world.texture_at(mx, my),
            u: 0.0,
            y_side: false,
        };
    }
    let ddx = if rx == 0.0 { f64::INFINITY } else { (1.0 / rx).abs() };
    let ddy = if ry == 0.0 { f64::INFINITY } else { (1.0 / ry).abs() };
    let (step_x, mut side_x) = if rx < 0.0 {
        (-1, (px - mx as f64) * ddx)
    } else {
        (1, (mx as f64 + 1.0 - px) * ddx)
    };
    let (step_y, mut side_y) = if ry < 0.0 {
        (-1, (py - my as f64) * ddy)
    } else {
        (1, (my as f64 + 1.0 - py) * ddy)
    };
    let limit = 4 * world.cells + 4;
    let mut y_side = false;
    for _ in 0..limit {
        if side_x < side_y {
            side_x += ddx;
            mx += step_x;
            y_side = false;
        } else {
            side_y += ddy;
            my += step_y;
            y_side = true;
        }
        if world.is_wall(mx, my) {
            break;
        }
    }
    let perp = if y_side { side_y - ddy } else { side_x - ddx };
    let u = if y_side {
        (px + perp * rx).rem_euclid(1.0)
    } else {
        (py + perp * ry).rem_euclid(1.0)
    };
    Hit {
        perp: (perp * cs).max(1e-3),
        texture: world.texture_at(mx, my),
        u,
        y_side,
    }
}

fn sky_color(world: &World, azimuth: f64, elevation: f64) -> [u8; 3] {
    let sky = &SKIES[world.sky_id as usize % SKIES.len()];
    let t = (elevation / (PI / 4.0)).clamp(0.0, 1.0);
    let base = lerp(sky.horizon, sky.zenith, t);
    let toward = 0.5 * (1.0 + (azimuth - sky.sun_azimuth).cos());
    let mut c = lerp(base, sky.glow, 0.5 * toward * (1.0 - t));
    let da = wrap_angle(azimuth - sky.sun_azimuth);
    let de = elevation - SUN_ELEVATION;
    if da * da + de * de < SUN_RADIUS * SUN_RADIUS {
        c = sky.sun;
    }
    c
}

fn floor_color(world: &World, wx: f64, wy: f64) -> [u8; 3] {
    let cx = (wx / world.cell_size).floor() as i64;
    let cy = (wy / world.cell_size).floor() as i64;
    let half = world.cells as i64 / 2;
    let quadrant = (cx >= half) as usize + 2 * (cy >= half) as usize;
    FLOOR_TONES[quadrant][(cx + cy).rem_euclid(2) as usize]
}

fn body_texel(u: f64, v: f64, facing_camera: bool) -> Option<[u8; 3]> {
    let du = (u - 0.5).abs();
    if v < 0.3 {
        let (hx, hy) = (du / 0.22, (v - 0.15) / 0.15);
        if hx * hx + hy * hy <= 1.0 {
            if facing_camera && (0.1..0.18).contains(&v) && du < 0.18 {
                return Some(BODY_VISOR);
            }
            return Some(BODY_HEAD);
        }
        None
    } else if v < 0.72 {
        (du < 0.45).then_some(BODY_TORSO)
    } else {
        ((u - 0.3).abs() < 0.1 || (u - 0.7).abs() < 0.1).then_some(shade(BODY_TORSO, 0.6))
    }
}

enum SpriteKind {
    Landmark(LandmarkShape, [u8; 3]),
    Body(bool),
}

struct Sprite {
    x: f64,
    y: f64,
    width: f64,
    height: f64,
    kind: SpriteKind,
}

fn render_perspective(
    world: &World,
    cam: &Camera,
    rcfg: &RenderConfig,
    body: Option<Body>,
) -> Frame {
    let n = rcfg.size;
    let half_fov = (rcfg.fov_deg.to_radians() / 2.0).tan();
    let f = n as f64 / 2.0 / half_fov;
    let horizon = n as f64 / 2.0 - f * cam.tilt.tan();
    let (dx, dy) = (cam.yaw.cos(), cam.yaw.sin());
    let (plx, ply) = (-dy * half_fov, dx * half_fov);
    let h = cam.height;
    let mut frame = Frame::filled(n, [0, 0, 0]);
    let mut zbuf = vec![f64::INFINITY; n];

    for (i, z) in zbuf.iter_mut().enumerate() {
        let cx = 2.0 * (i as f64 + 0.5) / n as f64 - 1.0;
        let (rx, ry) = (dx + plx * cx, dy + ply * cx);
        let azimuth = ry.atan2(rx);
        let hit = cast_ray(world, cam.x, cam.y, rx, ry);
        *z = hit.perp;
        let top = horizon + f * (h - rcfg.wall_height) / hit.perp;
        let bottom = horizon + f * h / hit.perp;
        let tex = &WALL_TEXTURES[hit.texture as usize % WALL_TEXTURES.len()];
        for j in 0..n {
            let yc = j as f64 + 0.5;
            let color = if yc >= top && yc < bottom {
                let zw = h - (yc - horizon) * hit.perp / f;
                let v = ((rcfg.wall_height - zw) / rcfg.wall_height).clamp(0.0, 0.999_999);
                let c = tex.sample(hit.u, v);
                if hit.y_side {
                    shade(c, 0.8)
                } else {
                    c
                }
            } else if yc >= bottom && yc > horizon {
                let d = f * h / (yc - horizon);
                floor_color(world, cam.x + d * rx, cam.y + d * ry)
            } else {
                let elevation = ((horizon - yc) / f).atan();
                sky_color(world, azimuth, elevation)
            };
            frame.set(i, j, color);
        }
    }

    let mut sprites: Vec<Sprite> = world
        .landmarks
        .iter()
        .map(|l| Sprite {
            x: l.x,
            y: l.y,
            width: LANDMARK_WIDTH,
            height: LANDMARK_HEIGHT,
            kind: SpriteKind::Landmark(l.shape, l.color),
        })
        .collect();
    if let Some(b) = body {
        sprites.push(Sprite {
            x: b.x,
            y: b.y,
            width: BODY_WIDTH,
            height: BODY_HEIGHT,
            kind: SpriteKind::Body(b.facing_camera),
        });
    }
    let depth_of = |s: &Sprite| (s.x - cam.x) * dx + (s.y - cam.y) * dy;
    sprites.sort_by(|a, b| depth_of(b).total_cmp(&depth_of(a)));

    for s in &sprites {
        let (rx, ry) = (s.x - cam.x, s.y - cam.y);
        let depth = rx * dx + ry * dy;
        if depth < 0.05 {
            continue;
        }
        let lateral = -rx * dy + ry * dx;
        let sx = n as f64 / 2.0 + f * lateral / depth;
        let hw = f * s.width / 2.0 / depth;
        let top = horizon + f * (h - s.height) / depth;
        let bottom = horizon + f * h / depth;
        let i0 = (sx - hw).floor().max(0.0) as usize;
        let i1 = ((sx + hw).ceil().max(0.0) as usize).min(n);
        let j0 = top.floor().max(0.0) as usize;
        let j1 = (bottom.ceil().max(0.0) as usize).min(n);
        for i in i0..i1 {
            if depth >= zbuf[i] {
                continue;
            }
            let u = (i as f64 + 0.5 - (sx - hw)) / (2.0 * hw);
            if !(0.0..1.0).contains(&u) {
                continue;
            }
            for j in j0..j1 {
                let v = (j as f64 + 0.5 - top) / (bottom - top);
                if !(0.0..1.0).contains(&v) {
                    continue;
                }
                let c = match s.kind {
                    SpriteKind::Landmark(shape, color) => shape.contains(u, v).then_some(color),
                    SpriteKind::Body(facing) => body_texel(u, v, facing),
                };
                if let Some(c) = c {
                    frame.set(i, j, c);
                }
            }
        }
    }
    frame
}

fn render_bev(world: &World, state: &AgentState, rcfg: &RenderConfig) -> Frame {
    let n = rcfg.size;
    let scale = n as f64 / world.side();
    let cs = world.cell_size;
    let mut frame = Frame::filled(n, BEV_FLOOR);
    for j in 0..n {
        for i in 0..n {
            let wx = (i as f64 + 0.5) / scale;
            let wy = (j as f64 + 0.5) / scale;
            let (cx, cy) = ((wx / cs).floor() as i64, (wy / cs).floor() as i64);
            if world.is_wall(cx, cy) {
                let tex = &WALL_TEXTURES[world.texture_at(cx, cy) as usize % WALL_TEXTURES.len()];
                frame.set(i, j, tex.sample((wx / cs).fract(), (wy / cs).fract()));
                continue;
            }
            for l in &world.landmarks {
                let u = (wx - l.x) / LANDMARK_BEV_SIZE + 0.5;
                let v = (wy - l.y) / LANDMARK_BEV_SIZE + 0.5;
                if (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v) && l.shape.contains(u, v) {
                    frame.set(i, j, l.color);
                }
            }
        }
    }
    draw_marker(&mut frame, state.x * scale, state.y * scale, state.yaw);
    frame
}

/// Triangle vertices in pixel coordinates, centroid at `(cu, cv)`.
pub(crate) fn marker_triangle(size: usize, cu: f64, cv: f64, yaw: f64) -> [(f64, f64); 3] {
    let len = marker_length_px(size);
    let width = 0.5 * len;
    let (c, s) = (yaw.cos(), yaw.sin());
    let (px, py) = (-s, c);
    let bx = cu - len / 3.0 * c;
    let by = cv - len / 3.0 * s;
    [
        (cu + 2.0 * len / 3.0 * c, cv + 2.0 * len / 3.0 * s),
        (bx + width / 2.0 * px, by + width / 2.0 * py),
        (bx - width / 2.0 * px, by - width / 2.0 * py),
    ]
}

/// Anti-aliased marker; partial coverage is encoded as desaturation so that a
/// coverage-weighted centroid recovers sub-pixel position.
fn draw_marker(frame: &mut Frame, cu: f64, cv: f64, yaw: f64) {
    let n = frame.size();
    let tri = marker_triangle(n, cu, cv, yaw);
    let lo_u = tri.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let hi_u = tri.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).ceil().max(0.0) as usize;
    let lo_v = tri.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let hi_v = tri.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil().max(0.0) as usize;
    for j in lo_v..hi_v.min(n) {
        for i in lo_u..hi_u.min(n) {
            let cov = coverage(&tri, i as f64, j as f64);
            let q = (MARKER_RAMP * (1.0 - cov)).round();
            if q < MARKER_RAMP {
                frame.set(i, j, [255, q as u8, q as u8]);
            }
        }
    }
}

/// Area of the triangle inside the unit square at `(x0, y0)`.
fn coverage(tri: &[(f64, f64); 3], x0: f64, y0: f64) -> f64 {
    let mut poly: Vec<(f64, f64)> = tri.to_vec();
    let planes: [(usize, f64, bool); 4] = [
        (0, x0, true),
        (0, x0 + 1.0, false),
        (1, y0, true),
        (1, y0 + 1.0, false),
    ];
    for (axis, bound, keep_above) in planes {
        if poly.is_empty() {
            return 0.0;
        }
        let coord = |p: &(f64, f64)| if axis == 0 { p.0 } else { p.1 };
        let inside = |p: &(f64, f64)| {
            if keep_above {
                coord(p) >= bound
            } else {
                coord(p) <= bound
            }
        };
        let mut out = Vec::with_capacity(poly.len() + 2);
        for k in 0..poly.len() {
            let a = poly[k];
            let b = poly[(k + 1) % poly.len()];
            let (ia, ib) = (inside(&a), inside(&b));
            if ia {
                out.push(a);
            }
            if ia != ib {
                let t = (bound - coord(&a)) / (coord(&b) - coord(&a));
                out.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
            }
        }
        poly = out;
    }
    let mut area = 0.0;
    for k in 0..poly.len() {
        let a = poly[k];
        let b = poly[(k + 1) % poly.len()];
        area += a.0 * b.1 - b.0 * a.1;
    }
    (area / 2.0).abs()
}
