//! Pixel-space image metrics and bootstrap confidence intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XvwmError};
use crate::sim::Frame;

pub const PSNR_CAP_DB: f64 = 99.0;
const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    /// Mean squared error on the `[0, 1]` scale.
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl PixelMetrics {
    /// Elementwise best of two scores (lowest mse, highest psnr and ssim).
    pub fn best(self, other: PixelMetrics) -> PixelMetrics {
        PixelMetrics {
            mse: self.mse.min(other.mse),
            psnr: self.psnr.max(other.psnr),
            ssim: self.ssim.max(other.ssim),
        }
    }
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

fn check_shapes(pred: &Frame, gt: &Frame) -> Result<()> {
    if pred.size() != gt.size() {
        return Err(XvwmError::Usage(format!(
            "frame sizes differ: {} vs {}",
            pred.size(),
            gt.size()
        )));
    }
    Ok(())
}

pub fn mse(pred: &Frame, gt: &Frame) -> Result<f64> {
    check_shapes(pred, gt)?;
    let sum: f64 = pred
        .pixels()
        .iter()
        .zip(gt.pixels())
        .map(|(&a, &b)| {
            let d = (a as f64 - b as f64) / 255.0;
            d * d
        })
        .sum();
    Ok(sum / pred.pixels().len() as f64)
}

/// Mean SSIM over all 8×8 windows (stride 1) and the three channels.
pub fn ssim(pred: &Frame, gt: &Frame) -> Result<f64> {
    check_shapes(pred, gt)?;
    let n = pred.size();
    if n < SSIM_WINDOW {
        return Err(XvwmError::Usage(format!("ssim needs frames of at least {SSIM_WINDOW} px")));
    }
    let (a, b) = (pred.pixels(), gt.pixels());
    let px = |buf: &[u8], x: usize, y: usize, c: usize| buf[(y * n + x) * 3 + c] as f64 / 255.0;
    let area = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for y0 in 0..=n - SSIM_WINDOW {
            for x0 in 0..=n - SSIM_WINDOW {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let (u, v) = (px(a, x, y, c), px(b, x, y, c));
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / area, sb / area);
                let va = (saa / area - ma * ma).max(0.0);
                let vb = (sbb / area - mb * mb).max(0.0);
                let cov = sab / area - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

pub fn pixel_metrics(pred: &Frame, gt: &Frame) -> Result<PixelMetrics> {
    let m = mse(pred, gt)?;
    Ok(PixelMetrics {
        mse: m,
        psnr: psnr_from_mse(m),
        ssim: ssim(pred, gt)?,
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Median with the midpoint convention for even counts; NaN when empty.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Confidence interval from the percentile bootstrap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn overlaps(&self, other: &Interval) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }
}

/// 95% percentile-bootstrap interval of `stat` over `resamples` resamples.
pub fn bootstrap_ci(xs: &[f64], stat: impl Fn(&[f64]) -> f64, resamples: usize, seed: u64) -> Interval {
    if xs.is_empty() || resamples == 0 {
        return Interval {
            lo: f64::NAN,
            hi: f64::NAN,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0.0; xs.len()];
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            for b in buf.iter_mut() {
                *b = xs[rng.gen_range(0..xs.len())];
            }
            stat(&buf)
        })
        .collect();
    stats.sort_by(|a, b| a.total_cmp(b));
    let pick = |q: f64| stats[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Interval {
        lo: pick(0.025),
        hi: pick(0.975),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_frames() {
        let f = Frame::new(8, 8, (0..192).map(|i| (i * 7 % 256) as u8).collect()).unwrap();
        let m = pixel_metrics(&f, &f).unwrap();
        assert_eq!(m.mse, 0.0);
        assert_eq!(m.psnr, PSNR_CAP_DB);
        assert!((m.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn bootstrap_of_constant_is_degenerate() {
        let ci = bootstrap_ci(&[2.0; 20], mean, 200, 1);
        assert_eq!((ci.lo, ci.hi), (2.0, 2.0));
    }
}
