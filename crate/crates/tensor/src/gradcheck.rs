//! Central finite-difference verification of analytic gradients.

use crate::tensor::Tensor;

/// Result of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per parameter tensor.
    pub per_param: Vec<f64>,
    pub tolerance: f64,
    pub checked_elements: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.per_param.iter().all(|&e| e < self.tolerance)
    }

    pub fn param_passed(&self, i: usize) -> bool {
        self.per_param[i] < self.tolerance
    }
}

/// Relative error with a floor on the denominator so that gradients that are
/// zero analytically and numerically compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Check `analytic[i]` against central differences of `f` at `params` with
/// step `h`. `f` must be deterministic.
pub fn finite_diff_check(
    mut f: impl FnMut(&[Tensor<f64>]) -> f64,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    h: f64,
    tolerance: f64,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len(), "one gradient per parameter");
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut checked = 0;
    for p in 0..params.len() {
        let mut worst: f64 = 0.0;
        for i in 0..params[p].numel() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let plus = f(&work);
            work[p].data_mut()[i] = orig - h;
            let minus = f(&work);
            work[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[p].data()[i], numeric));
            checked += 1;
        }
        per_param.push(worst);
    }
    GradCheckReport {
        per_param,
        tolerance,
        checked_elements: checked,
    }
}
