//! Activation-free attention, where the product can be reassociated.
//!
//! `(q kᵀ) v` costs `O(d L²)` and materializes an `L×L` matrix; `q (kᵀ v)` costs
//! `O(d² L)` and only ever holds a `d×d` matrix.

use super::{attention, AttentionConfig};
use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{gemm, gemm_tn, Tensor};

fn check<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (lq, d) = q.dims2("linear_attention")?;
    let (lk, dk) = k.dims2("linear_attention")?;
    let (lv, dv) = v.dims2("linear_attention")?;
    if d != dk || lk != lv {
        return Err(Error::Shape {
            op: "linear_attention",
            lhs: q.shape().to_vec(),
            rhs: if d != dk {
                k.shape().to_vec()
            } else {
                v.shape().to_vec()
            },
        });
    }
    Ok((lq, d, dv))
}

/// `q (kᵀ v) / √d`.
pub fn linear_attention_reordered<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (lq, d, dv) = check(q, k, v)?;
    let lk = k.shape()[0];
    let mut kv = vec![T::zero(); d * dv];
    gemm_tn(k.data(), v.data(), &mut kv, lk, d, dv);
    let mut out = vec![T::zero(); lq * dv];
    gemm(q.data(), &kv, &mut out, lq, d, dv);
    let inv = T::of(1.0 / (d as f64).sqrt());
    for o in &mut out {
        *o *= inv;
    }
    let out = Tensor::from_parts(vec![lq, dv], out);
    out.ensure_finite("linear_attention_reordered")?;
    Ok(out)
}

/// The same quantity through the ordinary attention path, `φ = identity` with `α = 0`.
pub fn linear_attention_unreordered<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, d, _) = check(q, k, v)?;
    attention(q, k, v, &AttentionConfig::new(Activation::Identity, 0.0, 1, d), None)
}
