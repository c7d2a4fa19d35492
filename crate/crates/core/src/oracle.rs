//! Central-difference gradient oracle.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MIN_STEP: f64 = 1e-4;
pub const MAX_STEP: f64 = 1e-2;

/// Numerical gradient of a scalar objective by central differences, one coordinate at a time.
///
/// The divisor is the actual distance between the perturbed points as represented in
/// `T`, so rounding of `x ± step` does not bias the estimate. Objective values and
/// quotients are kept in `f64`.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, step: f64) -> Result<Tensor<f64>>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> f64,
{
    if !(MIN_STEP..=MAX_STEP).contains(&step) {
        return Err(Error::Usage(format!(
            "finite-difference step {step} outside [{MIN_STEP}, {MAX_STEP}]"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        let plus = orig + T::of(step);
        let minus = orig - T::of(step);
        probe.data_mut()[i] = plus;
        let fp = f(&probe);
        probe.data_mut()[i] = minus;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::OracleFailure { index: i });
        }
        grad.push((fp - fm) / (plus.f64() - minus.f64()));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::<f64>::from_rows(&[&[1.0, 2.0]]).unwrap();
        let g = finite_diff_grad(|t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum(), &x, 1e-3).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn relu_locally_linear() {
        let x = Tensor::<f32>::full([1], 1.0);
        let g = finite_diff_grad(|t: &Tensor<f32>| Activation::Relu.value(t.data()[0]) as f64, &x, 1e-3).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_step_out_of_range() {
        let x = Tensor::<f64>::full([1], 1.0);
        assert!(finite_diff_grad(|_| 0.0, &x, 1e-6).is_err());
        assert!(finite_diff_grad(|_| 0.0, &x, 0.1).is_err());
    }

    #[test]
    fn reports_failing_coordinate() {
        let x = Tensor::<f64>::from_rows(&[&[1.0, 0.0]]).unwrap();
        let err = finite_diff_grad(
            |t: &Tensor<f64>| if t.data()[1] != 0.0 { f64::NAN } else { 0.0 },
            &x,
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::OracleFailure { index: 1 }));
    }
}
