//! Central-finite-difference gradient verification.
//!
//! The numeric side re-evaluates the loss closure twice per coordinate and
//! never touches the analytic path, so it stays an independent oracle.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// Central difference gradient of `f` at `point`, one entry per coordinate.
pub fn central_diff_grad<F>(mut f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let plus = f(&probe);
        probe[i] = point[i] - step;
        let minus = f(&probe);
        probe[i] = point[i];
        grads.push((plus - minus) / (2.0 * step));
    }
    grads
}

/// Relative error between an analytic and a numeric derivative, guarded for
/// near-zero pairs.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-8 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Result of a sampled parameter-space gradient check.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub coordinates_checked: usize,
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compare an analytic gradient against central differences of `loss_fn` on
/// up to `max_coords` randomly chosen coordinates of a flat parameter vector.
///
/// `loss_fn` receives the full (possibly perturbed) parameter vector and must
/// re-run the forward pass from scratch.
pub fn check_sampled<F>(
    mut loss_fn: F,
    params: &[f64],
    analytic: &[f64],
    max_coords: usize,
    step: f64,
    rng: &mut ChaCha8Rng,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut coords: Vec<usize> = (0..params.len()).collect();
    coords.shuffle(rng);
    coords.truncate(max_coords);

    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        coordinates_checked: coords.len(),
        max_relative_error: 0.0,
        worst_coordinate: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for &i in &coords {
        probe[i] = params[i] + step;
        let plus = loss_fn(&probe);
        probe[i] = params[i] - step;
        let minus = loss_fn(&probe);
        probe[i] = params[i];
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_coordinate = i;
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    report
}
