//! Central finite differences, used as the independent oracle for tape gradients.

use super::params::ParamStore;
use super::tape::Gradients;

/// Step used by every gradient check in this crate.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted element-wise relative error.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Magnitudes below this are compared on an absolute scale. Checks of a
/// loss larger than one scale the floor by the loss, since rounding in the
/// two evaluations grows with it.
pub const FD_FLOOR: f64 = 1e-6;

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for coordinate `i`.
pub fn central_difference_at(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut probe = x.to_vec();
    probe[i] = x[i] + h;
    let plus = f(&probe);
    probe[i] = x[i] - h;
    let minus = f(&probe);
    (plus - minus) / (2.0 * h)
}

/// Full central-difference gradient of `f` at `x`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| central_difference_at(&mut f, x, i, h))
        .collect()
}

/// `|a − b| / max(|a|, |b|, FD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, FD_FLOOR)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Floor used when checking the gradient of a loss of value `loss`.
pub fn loss_floor(loss: f64) -> f64 {
    FD_FLOOR * loss.abs().max(1.0)
}

/// Worst relative error over paired gradient entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

/// Outcome of comparing tape gradients with finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub worst: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst_at: Option<(String, usize)>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst <= FD_TOLERANCE
    }
}

/// Checks `grads` against central differences of `loss` for the parameters
/// of `store`. With `per_tensor = Some(k)` only `k` evenly strided entries of
/// each tensor are probed; parameters absent from `grads` count as zero.
pub fn check_params(
    store: &ParamStore,
    grads: &Gradients,
    per_tensor: Option<usize>,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> GradCheck {
    let mut probe = store.clone();
    let mut report = GradCheck {
        checked: 0,
        worst: 0.0,
        worst_at: None,
    };
    let floor = loss_floor(loss(store));
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let picks: Vec<usize> = match per_tensor {
            Some(k) if k < n => (0..k).map(|j| j * n / k + (n / k) / 2).collect(),
            _ => (0..n).collect(),
        };
        for i in picks {
            let x0 = store.get(id).values()[i];
            probe.get_mut(id).values_mut()[i] = x0 + FD_STEP;
            let plus = loss(&probe);
            probe.get_mut(id).values_mut()[i] = x0 - FD_STEP;
            let minus = loss(&probe);
            probe.get_mut(id).values_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let analytic = grads.param(id).map_or(0.0, |g| g[i]);
            let err = relative_error_floored(analytic, numeric, floor);
            report.checked += 1;
            if err > report.worst || report.worst_at.is_none() {
                report.worst = report.worst.max(err);
                if err >= report.worst {
                    report.worst_at = Some((store.name(id).to_string(), i));
                }
            }
        }
    }
    report
}
