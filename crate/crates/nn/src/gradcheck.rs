//! Central finite-difference verification of analytic gradients.

use crate::error::NnError;
use crate::scalar::Real;
use crate::tensor::{backward, no_grad, Tensor};

/// Compare the analytic gradient of `f` w.r.t. each tensor in `params`
/// against central differences with the given step, returning the maximum
/// relative error `|a − n| / max(1e-8, |a| + |n|)` over all coordinates.
///
/// `f` must be a deterministic function of the parameter data; it is
/// re-evaluated under perturbed parameters (with autodiff disabled).
pub fn grad_check_params<T: Real, F: FnMut() -> Tensor<T>>(
    mut f: F,
    params: &[Tensor<T>],
    step: f64,
) -> Result<f64, NnError> {
    for p in params {
        p.zero_grad();
    }
    let loss = f();
    backward(&loss)?;
    let analytic: Vec<Vec<T>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![T::zero(); p.numel()]))
        .collect();
    for p in params {
        p.zero_grad();
    }

    let h = T::from_f64(step);
    let mut max_err = 0.0f64;
    for (p, grad) in params.iter().zip(analytic.iter()) {
        let base = p.to_vec();
        for i in 0..base.len() {
            let mut probe = base.clone();
            probe[i] = base[i] + h;
            p.set_data(&probe);
            let f_plus = {
                let _g = no_grad();
                f().value().as_f64()
            };
            probe[i] = base[i] - h;
            p.set_data(&probe);
            let f_minus = {
                let _g = no_grad();
                f().value().as_f64()
            };
            p.set_data(&base);
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = grad[i].as_f64();
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

/// Single-parameter convenience wrapper around [`grad_check_params`].
pub fn grad_check<T: Real, F: FnMut() -> Tensor<T>>(
    f: F,
    p: &Tensor<T>,
    step: f64,
) -> Result<f64, NnError> {
    grad_check_params(f, std::slice::from_ref(p), step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let p = Tensor::param(1, 3, vec![1.0f64, -2.0, 0.5]);
        let pc = p.clone();
        let err = grad_check(move || pc.sum_all(), &p, 1e-5).unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn quadratic_function_is_tight() {
        let p = Tensor::param(1, 2, vec![0.7f64, -1.3]);
        let pc = p.clone();
        let err = grad_check(move || pc.mul(&pc).sum_all(), &p, 1e-5).unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn probes_leave_parameter_unchanged() {
        let p = Tensor::param(2, 2, vec![1.0f64, 2.0, 3.0, 4.0]);
        let pc = p.clone();
        grad_check(move || pc.mean_all(), &p, 1e-5).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(p.grad().is_none());
    }
}
