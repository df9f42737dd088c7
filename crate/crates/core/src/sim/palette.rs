//! Fixed colors, wall textures, skies and landmark shapes.
//!
//! No color here falls inside the marker detection window
//! (R >= 200, G <= 80, B <= 80); only the BEV marker uses it.

use serde::{Deserialize, Serialize};

pub const NUM_WALL_TEXTURES: usize = 8;
pub const NUM_SKIES: usize = 6;

/// BEV floor color.
pub const BEV_FLOOR: [u8; 3] = [62, 62, 68];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    VStripes,
    HStripes,
    Checker,
    Bricks,
    Dots,
    Diagonal,
    Frame,
    Solid,
}

#[derive(Clone, Copy, Debug)]
pub struct WallTexture {
    pub base: [u8; 3],
    pub accent: [u8; 3],
    pub pattern: Pattern,
}

impl WallTexture {
    /// Texel at `(u, v)` in `[0, 1)²`; `u` runs along the wall face, `v`
    /// downward from the top.
    pub fn sample(&self, u: f64, v: f64) -> [u8; 3] {
        let accent = match self.pattern {
            Pattern::VStripes => ((u * 4.0) as i64) % 2 == 1,
            Pattern::HStripes => ((v * 4.0) as i64) % 2 == 1,
            Pattern::Checker => (((u * 2.0) as i64) + ((v * 2.0) as i64)) % 2 == 1,
            Pattern::Bricks => {
                let row = (v * 4.0) as i64;
                let shift = if row % 2 == 0 { 0.0 } else { 0.25 };
                let fu = ((u + shift) * 2.0).fract();
                let fv = (v * 4.0).fract();
                fu < 0.08 || fv < 0.12
            }
            Pattern::Dots => {
                let du = (u * 3.0).fract() - 0.5;
                let dv = (v * 3.0).fract() - 0.5;
                du * du + dv * dv < 0.09
            }
            Pattern::Diagonal => ((u + v) * 3.0).rem_euclid(1.0) < 0.5,
            Pattern::Frame => !(0.15..0.85).contains(&u) || !(0.15..0.85).contains(&v),
            Pattern::Solid => false,
        };
        if accent {
            self.accent
        } else {
            self.base
        }
    }
}

pub const WALL_TEXTURES: [WallTexture; NUM_WALL_TEXTURES] = [
    WallTexture {
        base: [44, 84, 200],
        accent: [20, 40, 120],
        pattern: Pattern::VStripes,
    },
    WallTexture {
        base: [46, 164, 66],
        accent: [20, 92, 34],
        pattern: Pattern::HStripes,
    },
    WallTexture {
        base: [222, 204, 46],
        accent: [150, 130, 24],
        pattern: Pattern::Checker,
    },
    WallTexture {
        base: [142, 64, 182],
        accent: [82, 32, 112],
        pattern: Pattern::Bricks,
    },
    WallTexture {
        base: [232, 142, 44],
        accent: [250, 210, 150],
        pattern: Pattern::Dots,
    },
    WallTexture {
        base: [44, 192, 202],
        accent: [20, 112, 122],
        pattern: Pattern::Diagonal,
    },
    WallTexture {
        base: [204, 204, 204],
        accent: [110, 110, 120],
        pattern: Pattern::Frame,
    },
    WallTexture {
        base: [142, 92, 54],
        accent: [92, 58, 32],
        pattern: Pattern::Solid,
    },
];

#[derive(Clone, Copy, Debug)]
pub struct SkyStyle {
    pub zenith: [u8; 3],
    pub horizon: [u8; 3],
    pub glow: [u8; 3],
    pub sun: [u8; 3],
    /// Sun azimuth in radians, same convention as agent yaw.
    pub sun_azimuth: f64,
}

pub const SKIES: [SkyStyle; NUM_SKIES] = [
    // clear day
    SkyStyle {
        zenith: [60, 110, 210],
        horizon: [170, 205, 240],
        glow: [235, 240, 250],
        sun: [255, 250, 210],
        sun_azimuth: 0.7,
    },
    // sunset
    SkyStyle {
        zenith: [70, 60, 140],
        horizon: [250, 160, 110],
        glow: [255, 200, 140],
        sun: [255, 230, 120],
        sun_azimuth: 2.4,
    },
    // overcast
    SkyStyle {
        zenith: [120, 124, 134],
        horizon: [182, 186, 192],
        glow: [210, 212, 216],
        sun: [235, 235, 235],
        sun_azimuth: 4.0,
    },
    // night
    SkyStyle {
        zenith: [10, 12, 40],
        horizon: [40, 50, 90],
        glow: [70, 80, 130],
        sun: [230, 230, 250],
        sun_azimuth: 5.3,
    },
    // teal dusk
    SkyStyle {
        zenith: [20, 90, 100],
        horizon: [120, 200, 180],
        glow: [200, 240, 220],
        sun: [255, 255, 200],
        sun_azimuth: 3.3,
    },
    // violet dawn
    SkyStyle {
        zenith: [90, 50, 130],
        horizon: [230, 170, 210],
        glow: [250, 220, 235],
        sun: [255, 240, 200],
        sun_azimuth: 1.5,
    },
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LandmarkShape {
    Pillar,
    Diamond,
    Disk,
    Cross,
}

impl LandmarkShape {
    pub const ALL: [LandmarkShape; 4] = [
        LandmarkShape::Pillar,
        LandmarkShape::Diamond,
        LandmarkShape::Disk,
        LandmarkShape::Cross,
    ];

    /// Mask over the unit square, `u` left to right, `v` top to bottom.
    pub fn contains(self, u: f64, v: f64) -> bool {
        let du = (u - 0.5).abs() * 2.0;
        let dv = (v - 0.5).abs() * 2.0;
        match self {
            LandmarkShape::Pillar => du <= 0.6,
            LandmarkShape::Diamond => du + dv <= 1.0,
            LandmarkShape::Disk => du * du + dv * dv <= 1.0,
            LandmarkShape::Cross => du <= 0.34 || dv <= 0.34,
        }
    }
}

pub const LANDMARK_COLORS: [[u8; 3]; 8] = [
    [255, 232, 0],
    [0, 232, 232],
    [232, 40, 232],
    [250, 250, 250],
    [20, 20, 20],
    [255, 140, 0],
    [120, 255, 120],
    [90, 90, 255],
];

/// Floor checker tones in the perspective views, one pair per arena quadrant.
pub const FLOOR_TONES: [[[u8; 3]; 2]; 4] = [
    [[96, 92, 84], [120, 116, 106]],
    [[84, 96, 88], [106, 122, 112]],
    [[88, 88, 102], [110, 110, 128]],
    [[100, 90, 96], [126, 112, 120]],
];

pub const BODY_TORSO: [u8; 3] = [52, 96, 206];
pub const BODY_HEAD: [u8; 3] = [236, 196, 156];
pub const BODY_VISOR: [u8; 3] = [250, 240, 40];
