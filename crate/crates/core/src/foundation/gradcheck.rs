use crate::error::{Error, Result};
use crate::foundation::Tensor;

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub passed: bool,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare the gradient returned by `f` with coordinate-wise central
/// differences `(f(x+eps·e_i) − f(x−eps·e_i)) / 2eps`.
///
/// `f` returns the scalar value and its analytic gradient at the given point.
/// Relative error per coordinate uses `max(|analytic|, |numeric|, 1e-8)` as
/// denominator.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor<f64>) -> (f64, Tensor<f64>),
{
    grad_check_with(|p| f(p).0, |p| f(p), x, eps, tol)
}

/// Like [`grad_check`], with a cheaper value-only evaluator for the
/// perturbed points.
pub fn grad_check_with<V, G>(value: V, value_and_grad: G, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    V: Fn(&Tensor<f64>) -> f64,
    G: Fn(&Tensor<f64>) -> (f64, Tensor<f64>),
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let (f0, grad) = value_and_grad(x);
    if !f0.is_finite() {
        return Err(Error::NonFinite(format!("objective value {f0} at the check point")));
    }
    if grad.shape() != x.shape() {
        return Err(Error::shape("grad_check", grad.shape(), x.shape()));
    }
    let mut probe = x.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: 0,
        passed: true,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = value(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = value(&probe);
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at perturbed coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grad.data()[i];
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = i;
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let f = |p: &Tensor<f64>| (p.sum_squares(), p.scale(2.0));
        let r = grad_check(f, &x, 1e-5, 1e-6).unwrap();
        assert!(r.passed);
        assert!(r.max_rel_error < 1e-6);
    }

    #[test]
    fn linear_function() {
        let x = Tensor::from_vec(&[3], vec![-0.5, 3.0, 7.25]).unwrap();
        let f = |p: &Tensor<f64>| (p.sum(), Tensor::ones(p.shape()));
        let r = grad_check(f, &x, 1e-5, 1e-9).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn wrong_gradient_fails() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let f = |p: &Tensor<f64>| (p.sum_squares(), p.clone());
        let r = grad_check(f, &x, 1e-5, 1e-4).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let x = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let f = |p: &Tensor<f64>| (f64::NAN, p.clone());
        assert!(matches!(grad_check(f, &x, 1e-5, 1e-4), Err(Error::NonFinite(_))));
    }
}
