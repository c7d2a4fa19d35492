//! Attention kernels with a configurable weight function φ.
//!
//! φ is either row-wise softmax or `L^-α · h` for a point-wise `h`, where `L` is the
//! number of keys. The point-wise family needs no normalization across the sequence,
//! which is what lets [`attention_chunked`] combine key chunks with a single sum.

mod chunked;
mod linear;
mod multihead;
mod stats;

use serde::{Deserialize, Serialize};

use crate::activation::{softmax_in_place, Activation};
use crate::error::{Error, Result};
use crate::norm::{layernorm_rows, LAYERNORM_EPS};
use crate::real::Real;
use crate::tensor::{gemm, gemm_nt, Tensor};

pub use chunked::{attention_chunked, ReductionStats};
pub use linear::{linear_attention_reordered, linear_attention_unreordered};
pub use multihead::{
    multihead_attention, multihead_attention_backward, multihead_attention_forward, AttentionParams, MultiheadCache,
};
pub use stats::{init_weight_statistics, InitStats, MIN_TRIALS};

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub activation: Activation,
    /// Sequence-length exponent; ignored for softmax.
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "default_true")]
    pub qk_layernorm: bool,
    #[serde(default)]
    pub gated: bool,
    pub num_heads: usize,
    pub head_dim: usize,
}

impl AttentionConfig {
    /// Plain config without qk-layernorm or gate.
    pub fn new(activation: Activation, alpha: f64, num_heads: usize, head_dim: usize) -> Self {
        AttentionConfig {
            activation,
            alpha,
            qk_layernorm: false,
            gated: false,
            num_heads,
            head_dim,
        }
    }

    pub fn softmax(num_heads: usize, head_dim: usize) -> Self {
        Self::new(Activation::Softmax, 0.0, num_heads, head_dim)
    }

    /// `φ = L⁻¹ relu`.
    pub fn relu_attention(num_heads: usize, head_dim: usize) -> Self {
        Self::new(Activation::Relu, 1.0, num_heads, head_dim)
    }

    pub fn with_qk_layernorm(mut self, on: bool) -> Self {
        self.qk_layernorm = on;
        self
    }

    pub fn with_gate(mut self, on: bool) -> Self {
        self.gated = on;
        self
    }

    pub fn width(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.num_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("num_heads and head_dim must be positive".into()));
        }
        if self.qk_layernorm && self.head_dim == 1 {
            return Err(Error::Config("qk-layernorm needs head_dim >= 2".into()));
        }
        Ok(())
    }

    /// The factor `L^-α` for `seq_len` keys (1 for softmax).
    pub fn seq_scale(&self, seq_len: usize) -> f64 {
        if self.activation == Activation::Softmax {
            1.0
        } else {
            (seq_len as f64).powf(-self.alpha)
        }
    }

    /// Short human-readable label, e.g. `relu/a1/ln1/g0`.
    pub fn label(&self) -> String {
        format!(
            "{}/a{}/ln{}/g{}",
            self.activation, self.alpha, self.qk_layernorm as u8, self.gated as u8
        )
    }
}

/// Attention weights for one or more heads, shaped `[heads × L_q × L_k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T = f32> {
    pub weights: Tensor<T>,
}

impl<T: Real> AttentionWeights<T> {
    pub fn heads(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn queries(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn keys(&self) -> usize {
        self.weights.shape()[2]
    }
}

/// Gains for qk-layernorm, one vector of length `d` per projection.
#[derive(Clone, Copy, Debug)]
pub struct QkGains<'a, T = f32> {
    pub q: &'a Tensor<T>,
    pub k: &'a Tensor<T>,
}

/// Normalizes each row of a `[L×d]` matrix and scales by `gain`.
fn normalize_rows<T: Real>(x: &Tensor<T>, gain: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if gain.shape() != [d] {
        return Err(Error::Shape {
            op: "qk_layernorm",
            lhs: vec![d],
            rhs: gain.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); x.len() / d];
    layernorm_rows(x.data(), gain.data(), LAYERNORM_EPS, d, &mut out, &mut inv_std);
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Applies qk-layernorm when configured, after checking the `[L×d]` shapes of `q` and `k`.
fn prepare_qk<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    cfg: &AttentionConfig,
    gains: Option<QkGains<'_, T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (lq, d) = q.dims2("attention_logits")?;
    let (lk, dk) = k.dims2("attention_logits")?;
    if lq == 0 || lk == 0 {
        return Err(Error::EmptySequence);
    }
    if d != dk {
        return Err(Error::Shape {
            op: "attention_logits",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if cfg.qk_layernorm {
        let g = gains.ok_or(Error::MissingParameter("qk-layernorm gains"))?;
        Ok((normalize_rows(q, g.q)?, normalize_rows(k, g.k)?))
    } else {
        Ok((q.clone(), k.clone()))
    }
}

/// Raw logits for already-prepared queries and keys: `q kᵀ / √d`.
fn scaled_scores<T: Real>(q: &Tensor<T>, k: &Tensor<T>) -> Tensor<T> {
    let (lq, d) = (q.shape()[0], q.shape()[1]);
    let lk = k.shape()[0];
    let mut s = vec![T::zero(); lq * lk];
    gemm_nt(q.data(), k.data(), &mut s, lq, d, lk);
    let inv = T::of(1.0 / (d as f64).sqrt());
    for v in &mut s {
        *v *= inv;
    }
    Tensor::from_parts(vec![lq, lk], s)
}

/// Logit matrix `S[i][j] = ⟨q̃_i, k̃_j⟩ / √d`, with `q̃, k̃` layer-normalized iff configured.
pub fn attention_logits<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    cfg: &AttentionConfig,
    gains: Option<QkGains<'_, T>>,
) -> Result<Tensor<T>> {
    let (q, k) = prepare_qk(q, k, cfg, gains)?;
    let s = scaled_scores(&q, &k);
    s.ensure_finite("attention_logits")?;
    Ok(s)
}

/// Applies φ to `[L_q×L_k]` or `[heads×L_q×L_k]` logits.
pub fn apply_phi<T: Real>(s: &Tensor<T>, cfg: &AttentionConfig) -> Result<AttentionWeights<T>> {
    let shape = match *s.shape() {
        [q, k] => vec![1, q, k],
        [h, q, k] => vec![h, q, k],
        _ => {
            return Err(Error::InvalidShape {
                shape: s.shape().to_vec(),
                reason: "apply_phi expects [L×L] or [heads×L×L] logits".into(),
            })
        }
    };
    s.ensure_finite("apply_phi")?;
    let lk = shape[2];
    let mut w = s.data().to_vec();
    phi_in_place(&mut w, lk, cfg);
    let weights = Tensor::from_parts(shape, w);
    weights.ensure_finite("apply_phi")?;
    Ok(AttentionWeights { weights })
}

/// In-place φ over rows of length `keys`.
pub(crate) fn phi_in_place<T: Real>(w: &mut [T], keys: usize, cfg: &AttentionConfig) {
    phi_in_place_scaled(w, keys, cfg, cfg.seq_scale(keys));
}

/// Like [`phi_in_place`] but with an explicit `L^-α` factor, for kernels that see only a
/// slice of the keys.
pub(crate) fn phi_in_place_scaled<T: Real>(w: &mut [T], keys: usize, cfg: &AttentionConfig, scale: f64) {
    match cfg.activation {
        Activation::Softmax => {
            for row in w.chunks_exact_mut(keys) {
                softmax_in_place(row);
            }
        }
        h => {
            let scale = T::of(scale);
            for v in w.iter_mut() {
                *v = scale * h.value(*v);
            }
        }
    }
}

/// `o_i = Σ_j α_ij v_j`.
///
/// A single-head weight tensor takes `v: [L_k×d]` and returns `[L_q×d]`; `H` heads take
/// `v: [H×L_k×d]` and return `[H×L_q×d]`.
pub fn attention_output<T: Real>(w: &AttentionWeights<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (heads, lq, lk) = (w.heads(), w.queries(), w.keys());
    let (vh, vl, d, out_shape) = match *v.shape() {
        [l, d] if heads == 1 => (1, l, d, vec![lq, d]),
        [h, l, d] => (h, l, d, vec![h, lq, d]),
        _ => (0, 0, 0, vec![]),
    };
    if vh != heads || vl != lk {
        return Err(Error::Shape {
            op: "attention_output",
            lhs: w.weights.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); heads * lq * d];
    for h in 0..heads {
        gemm(
            &w.weights.data()[h * lq * lk..(h + 1) * lq * lk],
            &v.data()[h * lk * d..(h + 1) * lk * d],
            &mut out[h * lq * d..(h + 1) * lq * d],
            lq,
            lk,
            d,
        );
    }
    let out = Tensor::from_parts(out_shape, out);
    out.ensure_finite("attention_output")?;
    Ok(out)
}

/// Single-head attention computed in one pass over all keys.
pub fn attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
    gains: Option<QkGains<'_, T>>,
) -> Result<Tensor<T>> {
    let s = attention_logits(q, k, cfg, gains)?;
    let w = apply_phi(&s, cfg)?;
    attention_output(&w, v)
}
