//! The attention non-linearity menu.
//!
//! Every variant except [`Activation::Softmax`] is point-wise. Softmax normalizes
//! each row over the last axis and is handled by [`softmax_rows`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    ReluSquared,
    Gelu,
    Softplus,
    Identity,
    Relu6,
    Sigmoid,
    Softmax,
}

impl Activation {
    pub const ALL: [Activation; 8] = [
        Activation::Relu,
        Activation::ReluSquared,
        Activation::Gelu,
        Activation::Softplus,
        Activation::Identity,
        Activation::Relu6,
        Activation::Sigmoid,
        Activation::Softmax,
    ];

    pub const POINTWISE: [Activation; 7] = [
        Activation::Relu,
        Activation::ReluSquared,
        Activation::Gelu,
        Activation::Softplus,
        Activation::Identity,
        Activation::Relu6,
        Activation::Sigmoid,
    ];

    pub fn is_pointwise(self) -> bool {
        self != Activation::Softmax
    }

    /// Point-wise activations whose output is never negative.
    pub fn is_nonnegative(self) -> bool {
        matches!(
            self,
            Activation::Relu
                | Activation::ReluSquared
                | Activation::Relu6
                | Activation::Softplus
                | Activation::Sigmoid
                | Activation::Softmax
        )
    }

    /// Points where the derivative is discontinuous.
    pub fn kinks(self) -> &'static [f64] {
        match self {
            Activation::Relu | Activation::ReluSquared => &[0.0],
            Activation::Relu6 => &[0.0, 6.0],
            _ => &[],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::ReluSquared => "relu_squared",
            Activation::Gelu => "gelu",
            Activation::Softplus => "softplus",
            Activation::Identity => "identity",
            Activation::Relu6 => "relu6",
            Activation::Sigmoid => "sigmoid",
            Activation::Softmax => "softmax",
        }
    }

    /// `h(x)` for a point-wise activation.
    ///
    /// # Panics
    /// On [`Activation::Softmax`], which is not point-wise.
    #[inline]
    pub fn value<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::ReluSquared => {
                let r = x.max(T::zero());
                r * r
            }
            Activation::Gelu => gelu(x),
            Activation::Softplus => {
                // max(x, 0) + ln(1 + e^-|x|) avoids overflow for large |x|.
                x.max(T::zero()) + (-x.abs()).exp().ln_1p()
            }
            Activation::Identity => x,
            Activation::Relu6 => x.max(T::zero()).min(T::of(6.0)),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softmax => panic!("softmax is not a point-wise activation"),
        }
    }

    /// `h'(x)`; kinks take the zero subgradient (relu at 0, relu6 at 0 and 6).
    #[inline]
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::ReluSquared => T::of(2.0) * x.max(T::zero()),
            Activation::Gelu => gelu_derivative_with_cdf(x, normal_cdf(x)),
            Activation::Softplus => sigmoid(x),
            Activation::Identity => T::one(),
            Activation::Relu6 => {
                if x > T::zero() && x < T::of(6.0) {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::Softmax => panic!("softmax is not a point-wise activation"),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Activation::Relu,
            "relu_squared" | "relu2" | "relu^2" | "squared_relu" => Activation::ReluSquared,
            "gelu" => Activation::Gelu,
            "softplus" => Activation::Softplus,
            "identity" | "linear" | "none" => Activation::Identity,
            "relu6" => Activation::Relu6,
            "sigmoid" => Activation::Sigmoid,
            "softmax" => Activation::Softmax,
            other => return Err(Error::Usage(format!("unknown activation `{other}`"))),
        })
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Standard normal CDF.
pub(crate) fn normal_cdf<T: Real>(x: T) -> T {
    T::of(0.5) * (-x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erfc()
}

/// Exact GELU, `x·Φ(x)`.
fn gelu<T: Real>(x: T) -> T {
    x * normal_cdf(x)
}

/// GELU derivative `Φ(x) + x·φ(x)` given `Φ(x)`.
pub(crate) fn gelu_derivative_with_cdf<T: Real>(x: T, cdf: T) -> T {
    let pdf = (T::of(-0.5) * x * x).exp() * T::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Applies a point-wise activation, optionally also returning `h'(x)` at the same points.
pub fn apply_activation<T: Real>(
    h: Activation,
    x: &Tensor<T>,
    compute_grad: bool,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    if !h.is_pointwise() {
        return Err(Error::Usage(
            "softmax is row-wise; use softmax_rows instead of apply_activation".into(),
        ));
    }
    let y = x.map(|v| h.value(v));
    y.ensure_finite("apply_activation")?;
    let dy = if compute_grad {
        let g = x.map(|v| h.derivative(v));
        g.ensure_finite("apply_activation")?;
        Some(g)
    } else {
        None
    };
    Ok((y, dy))
}

/// Row-wise softmax over the last axis, with max subtraction and `f64` normalizer.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.ensure_finite("softmax_rows")?;
    let n = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        softmax_in_place(row);
    }
    Ok(out)
}

#[inline]
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v)).f64();
    let mut denom = 0.0f64;
    for v in row.iter_mut() {
        let e = (v.f64() - max).exp();
        denom += e;
        *v = T::of(e);
    }
    let inv = 1.0 / denom;
    for v in row.iter_mut() {
        *v = T::of(v.f64() * inv);
    }
}
