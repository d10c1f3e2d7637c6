//! Central-difference verification of analytic gradients.

use super::tensor::TokenMatrix;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)` over all coordinates.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (input index, flat coordinate) where the largest relative error occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-8;

/// Compares the gradients returned by `f` with central differences of its value.
///
/// `f` maps a list of input tensors to `(value, gradients)` where
/// `gradients[k]` has the shape of `inputs[k]`.
pub fn grad_check<F>(f: F, inputs: &[TokenMatrix], eps: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&[TokenMatrix]) -> (f64, Vec<TokenMatrix>),
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let (_, analytic) = f(inputs);
    assert_eq!(analytic.len(), inputs.len(), "one gradient per input");

    let mut probe = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut worst = (0, 0);
    let mut coordinates = 0;
    for k in 0..inputs.len() {
        assert_eq!(analytic[k].shape(), inputs[k].shape(), "gradient shape for input {k}");
        for c in 0..inputs[k].as_slice().len() {
            let orig = inputs[k].as_slice()[c];
            probe[k].as_mut_slice()[c] = orig + eps;
            let plus = f(&probe).0;
            probe[k].as_mut_slice()[c] = orig - eps;
            let minus = f(&probe).0;
            probe[k].as_mut_slice()[c] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[k].as_slice()[c];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_abs = max_abs.max(abs);
            if rel > max_rel || !rel.is_finite() {
                max_rel = if rel.is_finite() { rel } else { f64::INFINITY };
                worst = (k, c);
            }
            coordinates += 1;
        }
    }
    GradCheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        worst,
        coordinates,
        tol,
        passed: max_rel <= tol,
    }
}
