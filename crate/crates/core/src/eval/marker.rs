//! Red agent-marker detection in top-down frames.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::sim::{marker_length_px, Frame};

const MIN_RED: u8 = 200;
const MAX_GREEN_BLUE: u8 = 80;
const MIN_PIXELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkerDetection {
    /// Sub-pixel image coordinates; pixel `(i, j)` covers `[i, i+1) × [j, j+1)`.
    pub centroid: (f64, f64),
    /// Direction from base to tip, in `[0, 2π)`, measured like world yaw.
    pub orientation: f64,
    pub pixel_count: usize,
    pub valid: bool,
    /// Several red blobs further apart than one marker length.
    pub ambiguous: bool,
}

impl MarkerDetection {
    fn invalid(pixel_count: usize) -> Self {
        Self {
            centroid: (f64::NAN, f64::NAN),
            orientation: f64::NAN,
            pixel_count,
            valid: false,
            ambiguous: false,
        }
    }

    pub fn distance_to(&self, u: f64, v: f64) -> f64 {
        ((self.centroid.0 - u).powi(2) + (self.centroid.1 - v).powi(2)).sqrt()
    }
}

fn weight(rgb: [u8; 3]) -> Option<f64> {
    let [r, g, b] = rgb;
    (r >= MIN_RED && g <= MAX_GREEN_BLUE && b <= MAX_GREEN_BLUE)
        .then(|| ((MAX_GREEN_BLUE - g.max(b)) as f64 / MAX_GREEN_BLUE as f64).max(1e-3))
}

pub fn detect_marker(bev: &Frame) -> MarkerDetection {
    let n = bev.size();
    let mut w = vec![0.0f64; n * n];
    let mut count = 0;
    for j in 0..n {
        for i in 0..n {
            if let Some(x) = weight(bev.get(i, j)) {
                w[j * n + i] = x;
                count += 1;
            }
        }
    }
    if count < MIN_PIXELS {
        return MarkerDetection::invalid(count);
    }

    let mut mass = 0.0;
    let (mut cu, mut cv) = (0.0, 0.0);
    for (idx, &x) in w.iter().enumerate() {
        if x > 0.0 {
            mass += x;
            cu += x * ((idx % n) as f64 + 0.5);
            cv += x * ((idx / n) as f64 + 0.5);
        }
    }
    cu /= mass;
    cv /= mass;

    let (mut suu, mut svv, mut suv) = (0.0, 0.0, 0.0);
    let mut far = (0.0, 0.0, -1.0);
    for (idx, &x) in w.iter().enumerate() {
        if x > 0.0 {
            let du = (idx % n) as f64 + 0.5 - cu;
            let dv = (idx / n) as f64 + 0.5 - cv;
            suu += x * du * du;
            svv += x * dv * dv;
            suv += x * du * dv;
            let d2 = du * du + dv * dv;
            if d2 > far.2 {
                far = (du, dv, d2);
            }
        }
    }
    let mut theta = 0.5 * (2.0 * suv).atan2(suu - svv);
    if theta.cos() * far.0 + theta.sin() * far.1 < 0.0 {
        theta += std::f64::consts::PI;
    }

    MarkerDetection {
        centroid: (cu, cv),
        orientation: theta.rem_euclid(TAU),
        pixel_count: count,
        valid: true,
        ambiguous: blobs_spread(&w, n) > marker_length_px(n),
    }
}

/// Largest distance between centroids of 8-connected components.
fn blobs_spread(w: &[f64], n: usize) -> f64 {
    let mut label = vec![usize::MAX; n * n];
    let mut centers: Vec<(f64, f64)> = Vec::new();
    for start in 0..n * n {
        if w[start] == 0.0 || label[start] != usize::MAX {
            continue;
        }
        let id = centers.len();
        let (mut m, mut su, mut sv) = (0.0, 0.0, 0.0);
        let mut stack = vec![start];
        label[start] = id;
        while let Some(p) = stack.pop() {
            let (i, j) = ((p % n) as i64, (p / n) as i64);
            m += w[p];
            su += w[p] * (i as f64 + 0.5);
            sv += w[p] * (j as f64 + 0.5);
            for dj in -1..=1 {
                for di in -1..=1 {
                    let (x, y) = (i + di, j + dj);
                    if x < 0 || y < 0 || x >= n as i64 || y >= n as i64 {
                        continue;
                    }
                    let q = y as usize * n + x as usize;
                    if w[q] > 0.0 && label[q] == usize::MAX {
                        label[q] = id;
                        stack.push(q);
                    }
                }
            }
        }
        centers.push((su / m, sv / m));
    }
    let mut spread: f64 = 0.0;
    for (a, p) in centers.iter().enumerate() {
        for q in &centers[a + 1..] {
            spread = spread.max(((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt());
        }
    }
    spread
}

/// Smallest absolute angle between two directions.
pub fn angular_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}
