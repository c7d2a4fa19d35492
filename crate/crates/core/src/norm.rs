//! Bias-free LayerNorm over the last axis.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-6;

/// Normalizes every vector along the last axis to zero mean and unit variance, then scales by `gain`.
pub fn layernorm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let d = x.last_dim();
    check_args(d, gain, eps)?;
    let mut out = x.clone();
    let mut inv_std = vec![T::zero(); x.len() / d];
    layernorm_rows(x.data(), gain.data(), eps, d, out.data_mut(), &mut inv_std);
    out.ensure_finite("layernorm")?;
    Ok(out)
}

/// Gradients of [`layernorm`] w.r.t. its input and gain.
pub fn layernorm_backward<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    eps: f64,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = x.last_dim();
    check_args(d, gain, eps)?;
    if dy.shape() != x.shape() {
        return Err(Error::Shape {
            op: "layernorm_backward",
            lhs: x.shape().to_vec(),
            rhs: dy.shape().to_vec(),
        });
    }
    let mut xhat = x.clone();
    let mut inv_std = vec![T::zero(); x.len() / d];
    let ones = vec![T::one(); d];
    layernorm_rows(x.data(), &ones, eps, d, xhat.data_mut(), &mut inv_std);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgain = Tensor::zeros([d]);
    layernorm_rows_backward(
        xhat.data(),
        &inv_std,
        gain.data(),
        dy.data(),
        d,
        dx.data_mut(),
        dgain.data_mut(),
    );
    Ok((dx, dgain))
}

fn check_args<T: Real>(d: usize, gain: &Tensor<T>, eps: f64) -> Result<()> {
    if gain.shape() != [d] {
        return Err(Error::Shape {
            op: "layernorm",
            lhs: vec![d],
            rhs: gain.shape().to_vec(),
        });
    }
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::Usage(format!("layernorm eps must be non-negative, got {eps}")));
    }
    if d == 1 && eps == 0.0 {
        return Err(Error::Usage(
            "layernorm over a single feature with eps = 0 divides by zero".into(),
        ));
    }
    Ok(())
}

/// Row kernel: writes `gain ⊙ x̂` to `out` and `1/σ` per row to `inv_std`.
pub(crate) fn layernorm_rows<T: Real>(x: &[T], gain: &[T], eps: f64, d: usize, out: &mut [T], inv_std: &mut [T]) {
    for ((row, orow), istd) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).zip(inv_std) {
        let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        *istd = T::of(inv);
        for ((o, &v), &g) in orow.iter_mut().zip(row).zip(gain) {
            *o = T::of((v.f64() - mean) * inv) * g;
        }
    }
}

/// Backward row kernel given the normalized rows `x̂` (before gain) and `1/σ`.
/// Adds into `dgain`; overwrites `dx`.
pub(crate) fn layernorm_rows_backward<T: Real>(
    xhat: &[T],
    inv_std: &[T],
    gain: &[T],
    dy: &[T],
    d: usize,
    dx: &mut [T],
    dgain: &mut [T],
) {
    let mut dxhat = vec![0.0f64; d];
    for (((xrow, dyrow), dxrow), &istd) in xhat
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .zip(inv_std)
    {
        let mut mean_dxhat = 0.0f64;
        let mut mean_dxhat_xhat = 0.0f64;
        for j in 0..d {
            dgain[j] += dyrow[j] * xrow[j];
            let g = dyrow[j].f64() * gain[j].f64();
            dxhat[j] = g;
            mean_dxhat += g;
            mean_dxhat_xhat += g * xrow[j].f64();
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let istd = istd.f64();
        for j in 0..d {
            dxrow[j] = T::of(istd * (dxhat[j] - mean_dxhat - xrow[j].f64() * mean_dxhat_xhat));
        }
    }
}
