//! Central finite differences, used as the independent oracle for every
//! analytic gradient in the crate.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every coordinate `i`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) {
        return invalid("eps", format!("must be positive, got {eps}"));
    }
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        *o = (plus - minus) / (2.0 * eps);
    }
    Tensor::new(x.shape(), out)
}

/// Symmetric relative error with an absolute floor so that pairs of
/// near-zero gradients compare as equal.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|t| t.item() * t.item(), &Tensor::scalar(3.0), 1e-3).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-5);
    }

    #[test]
    fn constant_and_sum() {
        let x = Tensor::new(&[2, 2], vec![1.0, -4.0, 2.5, 0.0]).unwrap();
        let g = finite_diff_grad(|_| 7.0, &x, 1e-4).unwrap();
        assert_eq!(g, Tensor::zeros(&[2, 2]));
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-4).unwrap();
        assert!(g.max_abs_diff(&Tensor::ones(&[2, 2])) < 1e-9);
    }

    #[test]
    fn rejects_non_positive_eps() {
        assert!(finite_diff_grad(|t| t.sum(), &Tensor::scalar(1.0), 0.0).is_err());
    }
}
