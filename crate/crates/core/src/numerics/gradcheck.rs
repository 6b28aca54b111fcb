//! Central finite-difference gradient oracle.

/// Perturbation used for every central difference.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so entries whose true value is
/// numerically zero are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub passed: bool,
    pub diagnostic: Option<String>,
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient of `loss` (computed by the caller) with
/// central differences at every parameter.
pub fn grad_check<F>(loss: F, params: &[f64], analytic: &[f64], tolerance: f64) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    let all: Vec<usize> = (0..params.len()).collect();
    grad_check_entries(loss, params, analytic, tolerance, &all)
}

/// Like [`grad_check`] but only probes the listed parameter indices.
pub fn grad_check_entries<F>(
    loss: F,
    params: &[f64],
    analytic: &[f64],
    tolerance: f64,
    indices: &[usize],
) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    let fail = |msg: String| GradCheckReport {
        max_rel_error: f64::INFINITY,
        worst_index: None,
        checked: 0,
        passed: false,
        diagnostic: Some(msg),
    };
    if analytic.len() != params.len() {
        return fail(format!(
            "analytic gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        ));
    }
    let base = loss(params);
    if !base.is_finite() {
        return fail(format!("loss is not finite at the base point ({base})"));
    }

    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    let mut worst_index = None;
    for &i in indices {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let up = loss(&probe);
        probe[i] = orig - FD_STEP;
        let down = loss(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return fail(format!("loss is not finite when perturbing parameter {i}"));
        }
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = relative_error(analytic[i], numeric);
        if err.is_nan() || err > worst {
            worst = err;
            worst_index = Some(i);
        }
    }
    GradCheckReport {
        max_rel_error: worst,
        worst_index,
        checked: indices.len(),
        passed: worst < tolerance,
        diagnostic: None,
    }
}
