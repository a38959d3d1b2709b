//! Central finite-difference verification of recorded gradients.

use crate::error::{Error, Result};

/// Floor on the relative-error denominator so that exact zeros compare as 0/1e-8.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Default perturbation for double precision.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error over all coordinates.
    pub max_rel_error: f64,
    /// Coordinate where the worst error occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// `(f(p+h·e_i) − f(p−h·e_i)) / 2h` for every coordinate.
pub fn central_differences<F>(mut f: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let plus = f(&p)?;
        p[i] = orig - step;
        let minus = f(&p)?;
        p[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Compares `analytic` against central differences of `f` at `params`.
///
/// `f` is evaluated twice at the base point first; differing results mean it
/// is not a deterministic function of its parameters.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::Dimension {
            op: "finite_diff_check",
            left: vec![params.len()],
            right: vec![analytic.len()],
        });
    }
    if !(step > 0.0) {
        return Err(Error::usage("finite-difference step must be positive"));
    }
    let first = f(params)?;
    let second = f(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }
    let numeric = central_differences(&mut f, params, step)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
        coordinates: params.len(),
    };
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(a, n);
        if e > report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: e,
                worst_index: i,
                analytic: a,
                numeric: n,
                coordinates: params.len(),
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let params = [0.3, -1.2, 2.5];
        let f = |p: &[f64]| Ok(p.iter().map(|x| 1.5 * x * x - x).sum::<f64>());
        let analytic: Vec<f64> = params.iter().map(|x| 3.0 * x - 1.0).collect();
        let r = finite_diff_check(f, &params, &analytic, 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-8, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let f = |p: &[f64]| Ok(p[0] * p[0]);
        let r = finite_diff_check(f, &[2.0], &[3.0], 1e-5).unwrap();
        assert!((r.max_rel_error - 0.25).abs() < 1e-6);
        assert_eq!(r.worst_index, 0);
    }

    #[test]
    fn nondeterminism_is_detected() {
        let mut calls = 0.0;
        let f = |p: &[f64]| {
            calls += 1.0;
            Ok(p[0] + calls)
        };
        assert!(matches!(
            finite_diff_check(f, &[1.0], &[1.0], 1e-5),
            Err(Error::Determinism { .. })
        ));
    }

    #[test]
    fn zero_gradients_use_the_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(0.0, 1e-12) - 1e-4).abs() < 1e-18);
    }
}
