//! Central finite-difference gradient checking.

use super::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero are judged on an absolute scale instead.
pub const REL_FLOOR: f64 = 1e-4;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input, element)` where the worst relative error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Relative error `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let y = f(inputs)?;
    if y.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient_check needs a scalar function, got shape {:?}",
            y.shape()
        )));
    }
    Ok(y.item())
}

/// Checks `f` at the point given by `inputs` (values, shape) against central
/// differences with step `h`.
pub fn gradient_check_many<F>(f: F, inputs: &[(Vec<f64>, Vec<usize>)], h: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let params = inputs
        .iter()
        .map(|(v, s)| Tensor::param(v.clone(), s))
        .collect::<Result<Vec<_>>>()?;
    let y = f(&params)?;
    let y_again = eval(&f, &params)?;
    if y.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient_check needs a scalar function, got shape {:?}",
            y.shape()
        )));
    }
    if y.item().to_bits() != y_again.to_bits() {
        return Err(Error::OracleInvalid(format!(
            "function is not deterministic: {} then {}",
            y.item(),
            y_again
        )));
    }
    let analytic: Vec<Vec<f64>> = if y.requires_grad() {
        y.backward()?;
        params.iter().map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()])).collect()
    } else {
        // Nothing in the graph depends on the inputs.
        params.iter().map(|p| vec![0.0; p.numel()]).collect()
    };

    let mut report =
        GradReport { max_rel_err: 0.0, max_abs_err: 0.0, worst: (0, 0), checked: 0, tol, passed: true };
    for (which, (values, _)) in inputs.iter().enumerate() {
        for e in 0..values.len() {
            let probe = |delta: f64| -> Result<f64> {
                let shifted: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, (v, s))| {
                        let mut v = v.clone();
                        if j == which {
                            v[e] += delta;
                        }
                        Tensor::from_vec(v, s)
                    })
                    .collect::<Result<_>>()?;
                eval(&f, &shifted)
            };
            let numeric = (probe(h)? - probe(-h)?) / (2.0 * h);
            let a = analytic[which][e];
            let r = rel_err(a, numeric);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if r > report.max_rel_err {
                report.max_rel_err = r;
                report.worst = (which, e);
            }
            report.checked += 1;
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}

/// Single-input form of [`gradient_check_many`].
pub fn gradient_check<F>(f: F, x: &[f64], shape: &[usize], h: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    gradient_check_many(|xs| f(&xs[0]), &[(x.to_vec(), shape.to_vec())], h, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn sum_of_squares_is_tight() {
        let x = [0.3, -1.2, 2.0, 0.7, -0.05];
        let r = gradient_check(|t| t.mul(t)?.sum(), &x, &[5], 1e-3, 1e-3).unwrap();
        assert!(r.passed);
        assert!(r.max_rel_err < 1e-5, "{r:?}");
        assert_eq!(r.checked, 5);
    }

    #[test]
    fn constant_function_passes() {
        let r = gradient_check(|_| Ok(Tensor::scalar(3.0)), &[1.0, 2.0], &[2], 1e-3, 1e-3).unwrap();
        assert!(r.passed);
        assert_eq!(r.max_abs_err, 0.0);
    }

    #[test]
    fn nondeterminism_is_reported() {
        let calls = Cell::new(0.0);
        let err = gradient_check(
            |t| {
                calls.set(calls.get() + 1.0);
                t.sum()?.add_scalar(calls.get())
            },
            &[1.0],
            &[1],
            1e-3,
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::OracleInvalid(_)));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // The detached copy doubles the value but not the gradient.
        let r = gradient_check(
            |t| {
                let y = t.mul(t)?.sum()?;
                let bogus = y.detach().scale(1.0)?;
                y.add(&bogus)
            },
            &[1.5],
            &[1],
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(!r.passed);
    }
}
