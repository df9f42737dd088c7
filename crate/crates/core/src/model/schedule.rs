//! Linear-β noise schedule, forward noising and the deterministic DDIM update.

use crate::error::{Result, XvwmError};

const BETA_START: f64 = 1e-4;
/// End value of β at a reference length of 1000 steps; scaled for shorter
/// schedules so the final ᾱ still approaches zero.
const BETA_END_AT_1000: f64 = 2e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize) -> Self {
        let beta_end = (BETA_END_AT_1000 * 1000.0 / steps as f64).min(0.5);
        Self::linear_between(steps, BETA_START, beta_end)
    }

    pub fn linear_between(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(steps >= 2, "schedule needs at least two steps");
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Self {
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or_else(|| {
            XvwmError::Range(format!("diffusion step {t} outside [0, {})", self.len()))
        })
    }

    /// `sqrt(ᾱ_t)·x0 + sqrt(1-ᾱ_t)·ε`.
    pub fn q_sample(&self, x0: &[f32], t: usize, eps: &[f32]) -> Result<Vec<f32>> {
        if x0.len() != eps.len() {
            return Err(XvwmError::Usage(format!(
                "q_sample: x0 has {} values, noise has {}",
                x0.len(),
                eps.len()
            )));
        }
        let ab = self.alpha_bar(t)?;
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
    }

    /// Descending timesteps for a `steps`-step DDIM pass, trailing spacing:
    /// the first is always `T-1`.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.len();
        if steps == 0 || steps > total {
            return Err(XvwmError::Range(format!(
                "DDIM step count {steps} outside [1, {total}]"
            )));
        }
        let mut out: Vec<usize> = (0..steps)
            .map(|i| {
                let t = (total as f64 * (1.0 - i as f64 / steps as f64)).round() as usize;
                t.saturating_sub(1)
            })
            .collect();
        out.dedup();
        Ok(out)
    }

    /// One η=0 DDIM update from `t` to `t_prev` (`None` means the clean
    /// image). The predicted `x0` is clamped to `[-1, 1]` and the noise
    /// estimate recomputed from it.
    pub fn ddim_step(&self, x_t: &mut [f32], eps_hat: &[f32], t: usize, t_prev: Option<usize>) -> Result<()> {
        let ab = self.alpha_bar(t)?;
        let ab_prev = match t_prev {
            Some(p) => self.alpha_bar(p)?,
            None => 1.0,
        };
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        for (x, &e) in x_t.iter_mut().zip(eps_hat) {
            let xv = *x as f64;
            let x0 = ((xv - sb * e as f64) / sa).clamp(-1.0, 1.0);
            let eps = (xv - sa * x0) / sb;
            *x = (pa * x0 + pb * eps) as f32;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_invariants() {
        for steps in [10, 50, 100, 1000] {
            let s = NoiseSchedule::linear(steps);
            assert!(s.alpha_bars[0] > 0.999);
            assert!(*s.alpha_bars.last().unwrap() < 0.05, "steps {steps}");
            assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn thousand_steps_match_reference_endpoints() {
        let s = NoiseSchedule::linear(1000);
        assert_eq!(s.betas[0], 1e-4);
        assert!((s.betas[999] - 2e-2).abs() < 1e-15);
    }

    #[test]
    fn q_sample_limits() {
        let s = NoiseSchedule::linear(100);
        let x0 = vec![0.5f32, -0.25, 1.0];
        let zeros = vec![0.0; 3];
        let xt = s.q_sample(&x0, 40, &zeros).unwrap();
        let a = s.alpha_bars[40].sqrt() as f32;
        for (x, y) in xt.iter().zip(&x0) {
            assert_eq!(*x, a * y);
        }
        let x_first = s.q_sample(&x0, 0, &[1.0; 3]).unwrap();
        for (x, y) in x_first.iter().zip(&x0) {
            assert!((x - y).abs() < 0.02);
        }
        assert!(matches!(s.q_sample(&x0, 100, &zeros), Err(XvwmError::Range(_))));
    }

    #[test]
    fn trailing_timesteps() {
        let s = NoiseSchedule::linear(100);
        let ts = s.ddim_timesteps(20).unwrap();
        assert_eq!(ts.len(), 20);
        assert_eq!(ts[0], 99);
        assert_eq!(ts[1], 94);
        assert_eq!(*ts.last().unwrap(), 4);
        assert_eq!(s.ddim_timesteps(100).unwrap(), (0..100).rev().collect::<Vec<_>>());
        assert!(s.ddim_timesteps(0).is_err());
    }

    #[test]
    fn ddim_with_true_noise_recovers_x0() {
        let s = NoiseSchedule::linear(100);
        let x0 = vec![0.3f32, -0.7, 0.9, 0.0];
        let eps = vec![0.5f32, -1.2, 0.1, 2.0];
        let mut x = s.q_sample(&x0, 99, &eps).unwrap();
        let ts = s.ddim_timesteps(20).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            // The exact noise at step t for this trajectory is eps itself.
            s.ddim_step(&mut x, &eps, t, ts.get(i + 1).copied()).unwrap();
        }
        for (a, b) in x.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}
