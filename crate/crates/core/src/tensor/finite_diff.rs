use super::{Scalar, Tensor};
use crate::error::{BimError, Result};

/// Central-difference gradient of a scalar function:
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every coordinate.
///
/// Independent of the autodiff graph; used as the oracle in gradient tests.
pub fn finite_diff<T, F>(f: F, point: &Tensor<T>, eps: f64) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<f64>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(BimError::Contract(format!("finite_diff eps must be > 0, got {eps}")));
    }
    let eval = |x: &Tensor<T>| -> Result<f64> {
        let v = f(x)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(BimError::Numeric(format!("finite_diff: function returned {v}")))
        }
    };
    let mut grad = Vec::with_capacity(point.numel());
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = point.data()[i];
        probe.data_mut()[i] = T::from_f64(orig.as_f64() + eps);
        let plus = eval(&probe)?;
        probe.data_mut()[i] = T::from_f64(orig.as_f64() - eps);
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push(T::from_f64((plus - minus) / (2.0 * eps)));
    }
    Tensor::new(point.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels::softmax_rows;

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::scalar(3.0);
        let g = finite_diff(|t| Ok(t.item() * t.item()), &x, 1e-4).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let x = Tensor::<f64>::from_f64(&[1, 5], &[0.3, -1.0, 2.0, 0.0, 0.7]).unwrap();
        let g = finite_diff(|t| Ok(softmax_rows(t.data(), 5).iter().sum()), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn non_finite_value_is_numeric_error() {
        let x = Tensor::<f64>::scalar(0.0);
        let err = finite_diff(|t| Ok(1.0 / t.item().abs().max(0.0) - f64::INFINITY), &x, 1e-3);
        assert!(matches!(err, Err(BimError::Numeric(_))));
        assert!(finite_diff(|t| Ok(t.item()), &x, 0.0).is_err());
    }
}
