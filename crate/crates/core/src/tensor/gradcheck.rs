//! Central finite-difference check of analytic gradients.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter, element)` where the worst error occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Relative error with an absolute floor so that vanishing gradients are
/// compared on an absolute scale.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares `f`'s analytic gradients against central differences with step
/// `eps` for every element of every parameter. `f` returns the loss and the
/// gradient of each parameter.
pub fn finite_diff_check<F>(mut f: F, params: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    let (loss, analytic) = f(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!("{} gradients for {} parameters", analytic.len(), params.len())));
    }
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        passed: true,
    };
    for p in 0..params.len() {
        if analytic[p].shape() != params[p].shape() {
            return Err(Error::Shape(format!("gradient {p} has the wrong shape")));
        }
        for j in 0..params[p].numel() {
            let orig = params[p].data()[j];
            work[p].data_mut()[j] = orig + eps;
            let (up, _) = f(&work)?;
            work[p].data_mut()[j] = orig - eps;
            let (down, _) = f(&work)?;
            work[p].data_mut()[j] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!("loss at parameter {p}[{j}]")));
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[p].data()[j];
            if !a.is_finite() {
                return Err(Error::NonFinite(format!("analytic gradient at {p}[{j}]")));
            }
            let err = relative_error(a, numeric, 1e-6);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (p, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let x = [Tensor::scalar(3.0)];
        let r = finite_diff_check(
            |p| {
                let v = p[0].data()[0];
                Ok((v * v, vec![Tensor::scalar(2.0 * v)]))
            },
            &x,
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(r.passed);
        assert!((r.analytic - 6.0).abs() < 1e-12);
        assert!((r.numeric - 6.0).abs() < 1e-6);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let x = [Tensor::scalar(3.0)];
        let r = finite_diff_check(
            |p| {
                let v = p[0].data()[0];
                Ok((v * v, vec![Tensor::scalar(2.1 * v)]))
            },
            &x,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn non_finite_loss_errors() {
        let x = [Tensor::scalar(0.0)];
        let r = finite_diff_check(|p| Ok((1.0 / p[0].data()[0], vec![Tensor::scalar(0.0)])), &x, 1e-4, 1e-4);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
