//! Deterministic multi-view arena simulator.
//!
//! One walled arena with textured walls and landmarks, an agent with a
//! continuous planar pose, and four synchronized cameras: egocentric, a fixed
//! bird's-eye map with a red triangle marker, an over-the-shoulder chase
//! camera and a front camera facing the agent.

mod palette;
mod render;
mod world;

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, XvwmError};

pub use palette::{LandmarkShape, NUM_SKIES, NUM_WALL_TEXTURES};
pub use render::{marker_length_px, project_to_bev, render, RenderConfig, MARKER_RAMP};
pub use world::{make_world, step, Landmark, World, WorldConfig, AGENT_RADIUS};

/// Camera perspective. Integer codes are stable and used on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewId {
    Ego = 0,
    Bev = 1,
    OverShoulder = 2,
    Front = 3,
}

impl ViewId {
    pub const ALL: [ViewId; 4] = [ViewId::Ego, ViewId::Bev, ViewId::OverShoulder, ViewId::Front];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ViewId::Ego => "ego",
            ViewId::Bev => "bev",
            ViewId::OverShoulder => "over_shoulder",
            ViewId::Front => "front",
        }
    }
}

impl fmt::Display for ViewId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ViewId {
    type Err = XvwmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ego" => Ok(ViewId::Ego),
            "bev" => Ok(ViewId::Bev),
            "over_shoulder" | "overshoulder" | "os" => Ok(ViewId::OverShoulder),
            "front" => Ok(ViewId::Front),
            other => Err(XvwmError::Usage(format!("unknown view `{other}`"))),
        }
    }
}

/// Planar agent pose in world units; yaw in `[0, 2π)`, measured from +x
/// toward +y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: yaw.rem_euclid(TAU),
        }
    }

    pub fn forward(&self) -> (f64, f64) {
        (self.yaw.cos(), self.yaw.sin())
    }

    /// Round every coordinate to the nearest `f32`, the precision of stored
    /// episodes.
    pub fn to_f32_precision(self) -> Self {
        Self {
            x: self.x as f32 as f64,
            y: self.y as f32 as f64,
            yaw: (self.yaw as f32 as f64).rem_euclid(TAU),
        }
    }
}

/// Per-timestep control in the agent's local frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    /// Forward translation.
    pub dx: f64,
    /// Strafe translation (positive toward the agent's right, i.e. +90° yaw).
    pub dy: f64,
    pub dphi: f64,
}

impl Action {
    pub fn new(dx: f64, dy: f64, dphi: f64) -> Self {
        Self { dx, dy, dphi }
    }

    pub fn to_f32_precision(self) -> Self {
        Self {
            dx: self.dx as f32 as f64,
            dy: self.dy as f32 as f64,
            dphi: self.dphi as f32 as f64,
        }
    }
}

/// Square RGB image, row-major, 3 bytes per pixel.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    size: usize,
    pixels: Vec<u8>,
}

impl fmt::Debug for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Frame({}x{})", self.size, self.size)
    }
}

impl Frame {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width != height {
            return Err(XvwmError::Usage(format!(
                "frames must be square, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height * Self::CHANNELS {
            return Err(XvwmError::Usage(format!(
                "{} bytes for a {width}x{height} RGB frame",
                pixels.len()
            )));
        }
        Ok(Self {
            size: width,
            pixels,
        })
    }

    pub fn filled(size: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            pixels.extend_from_slice(&rgb);
        }
        Self { size, pixels }
    }

    pub fn width(&self) -> usize {
        self.size
    }

    pub fn height(&self) -> usize {
        self.size
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.size + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.size + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Fraction of pixels whose RGB triple differs.
    pub fn fraction_differing(&self, other: &Frame) -> f64 {
        assert_eq!(self.size, other.size);
        let n = self.size * self.size;
        let diff = self
            .pixels
            .chunks(3)
            .zip(other.pixels.chunks(3))
            .filter(|(a, b)| a != b)
            .count();
        diff as f64 / n as f64
    }
}

/// Wrap an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w > std::f64::consts::PI {
        w - TAU
    } else {
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn view_codes_are_stable() {
        for (i, v) in ViewId::ALL.iter().enumerate() {
            assert_eq!(v.code() as usize, i);
            assert_eq!(ViewId::from_code(i as u8), Some(*v));
            assert_eq!(v.name().parse::<ViewId>().unwrap(), *v);
        }
        assert_eq!(ViewId::from_code(4), None);
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(std::f64::consts::PI), std::f64::consts::PI);
        assert!((wrap_angle(-std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert!((wrap_angle(3.0 * TAU + 0.5) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn frame_must_be_square() {
        assert!(Frame::new(4, 5, vec![0; 60]).is_err());
        assert!(Frame::new(4, 4, vec![0; 47]).is_err());
        assert!(Frame::new(4, 4, vec![255; 48]).is_ok());
    }
}
