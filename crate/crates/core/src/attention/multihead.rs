//! Multi-head attention over a batch of equal-length sequences, forward and backward.
//!
//! Tokens of all sequences are stacked as rows of `x: [N×D]` with `N = batch · L`.
//! Projections run on the whole stack; attention itself runs per (sequence, head).
//! With a gate the concatenated head outputs are multiplied elementwise by `x·Wg`
//! right before the output projection `Wo`.

use super::{phi_in_place, AttentionConfig};
use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::norm::{layernorm_rows, layernorm_rows_backward, LAYERNORM_EPS};
use crate::real::Real;
use crate::tensor::{gemm, gemm_acc, gemm_nt, gemm_tn, gemm_tn_acc, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T = f32> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    /// Gate projection, present iff the config is gated.
    pub wg: Option<Tensor<T>>,
    /// qk-layernorm gains `[head_dim]`, shared across heads; present iff configured.
    pub q_gain: Option<Tensor<T>>,
    pub k_gain: Option<Tensor<T>>,
}

impl<T: Real> AttentionParams<T> {
    /// Identity projections, unit gains.
    pub fn identity(cfg: &AttentionConfig) -> Self {
        let width = cfg.width();
        let eye = Tensor::identity(width);
        AttentionParams {
            wq: eye.clone(),
            wk: eye.clone(),
            wv: eye.clone(),
            wo: eye.clone(),
            wg: cfg.gated.then(|| eye.clone()),
            q_gain: cfg.qk_layernorm.then(|| Tensor::full([cfg.head_dim], T::one())),
            k_gain: cfg.qk_layernorm.then(|| Tensor::full([cfg.head_dim], T::one())),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor<T>| Tensor::zeros(t.shape());
        AttentionParams {
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
            wo: z(&self.wo),
            wg: self.wg.as_ref().map(z),
            q_gain: self.q_gain.as_ref().map(z),
            k_gain: self.k_gain.as_ref().map(z),
        }
    }

    /// Checks that the parameter set matches the config, naming what is missing or extra.
    pub fn check(&self, cfg: &AttentionConfig) -> Result<()> {
        cfg.validate()?;
        let width = cfg.width();
        for (name, w) in [("Wq", &self.wq), ("Wk", &self.wk), ("Wv", &self.wv), ("Wo", &self.wo)] {
            if w.shape() != [width, width] {
                return Err(Error::Config(format!(
                    "{name} has shape {:?}, expected [{width}, {width}]",
                    w.shape()
                )));
            }
        }
        match (&self.wg, cfg.gated) {
            (None, true) => return Err(Error::MissingParameter("gate weights Wg")),
            (Some(_), false) => return Err(Error::Config("gate weights supplied but config is not gated".into())),
            (Some(wg), true) if wg.shape() != [width, width] => {
                return Err(Error::Config(format!("Wg has shape {:?}", wg.shape())))
            }
            _ => {}
        }
        match (&self.q_gain, &self.k_gain, cfg.qk_layernorm) {
            (Some(gq), Some(gk), true) => {
                if gq.shape() != [cfg.head_dim] || gk.shape() != [cfg.head_dim] {
                    return Err(Error::Config(format!(
                        "qk-layernorm gains must have shape [{}]",
                        cfg.head_dim
                    )));
                }
            }
            (None, None, false) => {}
            (_, _, true) => return Err(Error::MissingParameter("qk-layernorm gains")),
            (_, _, false) => {
                return Err(Error::Config(
                    "qk-layernorm gains supplied but qk-layernorm is off".into(),
                ))
            }
        }
        Ok(())
    }
}

/// Everything the backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct MultiheadCache<T = f32> {
    seq_len: usize,
    x: Vec<T>,
    /// Projected values `[N×D]`.
    v: Vec<T>,
    /// Per (sequence, head): queries/keys as fed to the dot product, `[L×d]`.
    q_used: Vec<T>,
    k_used: Vec<T>,
    /// Per (sequence, head): normalized q/k before gain and their `1/σ`, when qk-layernorm is on.
    q_hat: Vec<T>,
    k_hat: Vec<T>,
    q_inv_std: Vec<T>,
    k_inv_std: Vec<T>,
    /// Per (sequence, head): logits and weights, `[L×L]`.
    logits: Vec<T>,
    weights: Vec<T>,
    /// Concatenated head outputs `[N×D]`.
    concat: Vec<T>,
    /// `x·Wg` when gated.
    gate: Option<Vec<T>>,
}

impl<T: Real> MultiheadCache<T> {
    /// Smallest distance from any logit to a kink of `h`; infinite for smooth `h`.
    pub fn kink_margin(&self, h: Activation) -> f64 {
        let kinks = h.kinks();
        self.logits
            .iter()
            .flat_map(|s| kinks.iter().map(move |k| (s.f64() - k).abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

fn gather_head<T: Real>(src: &[T], dst: &mut [T], rows: std::ops::Range<usize>, col0: usize, d: usize, width: usize) {
    for (r, out) in rows.zip(dst.chunks_exact_mut(d)) {
        out.copy_from_slice(&src[r * width + col0..r * width + col0 + d]);
    }
}

fn scatter_head<T: Real>(src: &[T], dst: &mut [T], rows: std::ops::Range<usize>, col0: usize, d: usize, width: usize) {
    for (r, row) in rows.zip(src.chunks_exact(d)) {
        dst[r * width + col0..r * width + col0 + d].copy_from_slice(row);
    }
}

/// Forward pass for a stack of sequences of length `seq_len`.
pub fn multihead_attention_forward<T: Real>(
    x: &Tensor<T>,
    seq_len: usize,
    params: &AttentionParams<T>,
    cfg: &AttentionConfig,
) -> Result<(Tensor<T>, MultiheadCache<T>)> {
    params.check(cfg)?;
    let (n, width) = x.dims2("multihead_attention")?;
    if seq_len == 0 {
        return Err(Error::EmptySequence);
    }
    if width != cfg.width() || n % seq_len != 0 {
        return Err(Error::Shape {
            op: "multihead_attention",
            lhs: x.shape().to_vec(),
            rhs: vec![seq_len, cfg.width()],
        });
    }
    let batch = n / seq_len;
    let (heads, d, l) = (cfg.num_heads, cfg.head_dim, seq_len);
    let xs = x.data();

    let project = |w: &Tensor<T>| {
        let mut out = vec![T::zero(); n * width];
        gemm(xs, w.data(), &mut out, n, width, width);
        out
    };
    let q = project(&params.wq);
    let k = project(&params.wk);
    let v = project(&params.wv);

    let per_head = l * d;
    let per_attn = l * l;
    let slots = batch * heads;
    let mut q_used = vec![T::zero(); slots * per_head];
    let mut k_used = vec![T::zero(); slots * per_head];
    let (mut q_hat, mut k_hat, mut q_inv_std, mut k_inv_std) = if cfg.qk_layernorm {
        (
            vec![T::zero(); slots * per_head],
            vec![T::zero(); slots * per_head],
            vec![T::zero(); slots * l],
            vec![T::zero(); slots * l],
        )
    } else {
        (Vec::new(), Vec::new(), Vec::new(), Vec::new())
    };
    let mut logits = vec![T::zero(); slots * per_attn];
    let mut weights = vec![T::zero(); slots * per_attn];
    let mut concat = vec![T::zero(); n * width];
    let inv_sqrt_d = T::of(1.0 / (d as f64).sqrt());
    let ones = vec![T::one(); d];
    let mut vh = vec![T::zero(); per_head];
    let mut oh = vec![T::zero(); per_head];

    for b in 0..batch {
        let rows = b * l..(b + 1) * l;
        for h in 0..heads {
            let slot = b * heads + h;
            let hs = slot * per_head..(slot + 1) * per_head;
            let col0 = h * d;
            gather_head(&q, &mut q_used[hs.clone()], rows.clone(), col0, d, width);
            gather_head(&k, &mut k_used[hs.clone()], rows.clone(), col0, d, width);
            gather_head(&v, &mut vh, rows.clone(), col0, d, width);
            if cfg.qk_layernorm {
                let gq = params.q_gain.as_ref().expect("checked").data();
                let gk = params.k_gain.as_ref().expect("checked").data();
                let ls = slot * l..(slot + 1) * l;
                layernorm_rows(
                    &q_used[hs.clone()],
                    &ones,
                    LAYERNORM_EPS,
                    d,
                    &mut q_hat[hs.clone()],
                    &mut q_inv_std[ls.clone()],
                );
                layernorm_rows(
                    &k_used[hs.clone()],
                    &ones,
                    LAYERNORM_EPS,
                    d,
                    &mut k_hat[hs.clone()],
                    &mut k_inv_std[ls],
                );
                for (dst, (&xh, &g)) in q_used[hs.clone()]
                    .iter_mut()
                    .zip(q_hat[hs.clone()].iter().zip(gq.iter().cycle()))
                {
                    *dst = xh * g;
                }
                for (dst, (&xh, &g)) in k_used[hs.clone()]
                    .iter_mut()
                    .zip(k_hat[hs.clone()].iter().zip(gk.iter().cycle()))
                {
                    *dst = xh * g;
                }
            }
            let attn = slot * per_attn..(slot + 1) * per_attn;
            let s = &mut logits[attn.clone()];
            gemm_nt(&q_used[hs.clone()], &k_used[hs.clone()], s, l, d, l);
            s.iter_mut().for_each(|v| *v *= inv_sqrt_d);
            let w = &mut weights[attn];
            w.copy_from_slice(s);
            phi_in_place(w, l, cfg);
            gemm(w, &vh, &mut oh, l, l, d);
            scatter_head(&oh, &mut concat, rows.clone(), col0, d, width);
        }
    }

    let gate = params.wg.as_ref().map(project);
    let mixed: Vec<T> = match &gate {
        Some(g) => concat.iter().zip(g).map(|(&c, &g)| c * g).collect(),
        None => concat.clone(),
    };
    let mut out = vec![T::zero(); n * width];
    gemm(&mixed, params.wo.data(), &mut out, n, width, width);
    let out = Tensor::from_parts(vec![n, width], out);
    out.ensure_finite("multihead_attention")?;

    let cache = MultiheadCache {
        seq_len,
        x: xs.to_vec(),
        v,
        q_used,
        k_used,
        q_hat,
        k_hat,
        q_inv_std,
        k_inv_std,
        logits,
        weights,
        concat,
        gate,
    };
    Ok((out, cache))
}

/// Single-sequence multi-head attention, `x: [L×D]`.
pub fn multihead_attention<T: Real>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    cfg: &AttentionConfig,
) -> Result<Tensor<T>> {
    let (l, _) = x.dims2("multihead_attention")?;
    multihead_attention_forward(x, l, params, cfg).map(|(out, _)| out)
}

/// Reverse-mode pass: returns `(∂/∂x, ∂/∂params)` given `∂/∂out`.
pub fn multihead_attention_backward<T: Real>(
    cache: &MultiheadCache<T>,
    params: &AttentionParams<T>,
    cfg: &AttentionConfig,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, AttentionParams<T>)> {
    let width = cfg.width();
    let n = cache.x.len() / width;
    if dout.shape() != [n, width] {
        return Err(Error::Shape {
            op: "multihead_attention_backward",
            lhs: vec![n, width],
            rhs: dout.shape().to_vec(),
        });
    }
    let (heads, d, l) = (cfg.num_heads, cfg.head_dim, cache.seq_len);
    let batch = n / l;
    let x = &cache.x;
    let dy = dout.data();
    let mut grads = params.zeros_like();

    // out = mixed · Wo
    let mixed: Vec<T> = match &cache.gate {
        Some(g) => cache.concat.iter().zip(g).map(|(&c, &g)| c * g).collect(),
        None => cache.concat.clone(),
    };
    gemm_tn(&mixed, dy, grads.wo.data_mut(), n, width, width);
    let mut dmixed = vec![T::zero(); n * width];
    gemm_nt(dy, params.wo.data(), &mut dmixed, n, width, width);

    let mut dx = vec![T::zero(); n * width];
    let dconcat = match (&cache.gate, &params.wg) {
        (Some(g), Some(wg)) => {
            let dgate: Vec<T> = dmixed.iter().zip(&cache.concat).map(|(&dm, &c)| dm * c).collect();
            let gw = grads.wg.as_mut().expect("gated");
            gemm_tn(x, &dgate, gw.data_mut(), n, width, width);
            gemm_nt(&dgate, wg.data(), &mut dx, n, width, width);
            dmixed.iter().zip(g).map(|(&dm, &g)| dm * g).collect()
        }
        _ => dmixed,
    };

    let per_head = l * d;
    let per_attn = l * l;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let scale = T::of(cfg.seq_scale(l));
    let mut dq = vec![T::zero(); n * width];
    let mut dk = vec![T::zero(); n * width];
    let mut dv = vec![T::zero(); n * width];
    let mut d_o = vec![T::zero(); per_head];
    let mut vh = vec![T::zero(); per_head];
    let mut dw = vec![T::zero(); per_attn];
    let mut dvh = vec![T::zero(); per_head];
    let mut dqh = vec![T::zero(); per_head];
    let mut dkh = vec![T::zero(); per_head];
    let mut dtmp = vec![T::zero(); per_head];

    for b in 0..batch {
        let rows = b * l..(b + 1) * l;
        for h in 0..heads {
            let slot = b * heads + h;
            let hs = slot * per_head..(slot + 1) * per_head;
            let attn = slot * per_attn..(slot + 1) * per_attn;
            let col0 = h * d;
            gather_head(&dconcat, &mut d_o, rows.clone(), col0, d, width);
            gather_head(&cache.v, &mut vh, rows.clone(), col0, d, width);
            let w = &cache.weights[attn.clone()];
            let s = &cache.logits[attn];

            // o = w · v
            gemm_nt(&d_o, &vh, &mut dw, l, d, l);
            gemm_tn(w, &d_o, &mut dvh, l, l, d);

            // dw → ds (in place)
            match cfg.activation {
                Activation::Softmax => {
                    for (dwr, wr) in dw.chunks_exact_mut(l).zip(w.chunks_exact(l)) {
                        let dot: f64 = dwr.iter().zip(wr).map(|(&a, &b)| a.f64() * b.f64()).sum();
                        for (g, &p) in dwr.iter_mut().zip(wr) {
                            *g = T::of(p.f64() * (g.f64() - dot) * inv_sqrt_d);
                        }
                    }
                }
                act => {
                    let c = scale * T::of(inv_sqrt_d);
                    for (g, &sv) in dw.iter_mut().zip(s) {
                        *g = *g * c * act.derivative(sv);
                    }
                }
            }

            // s = q_used · k_usedᵀ (the 1/√d is already folded into ds)
            gemm(&dw, &cache.k_used[hs.clone()], &mut dqh, l, l, d);
            gemm_tn(&dw, &cache.q_used[hs.clone()], &mut dkh, l, l, d);

            if cfg.qk_layernorm {
                let ls = slot * l..(slot + 1) * l;
                let gq = params.q_gain.as_ref().expect("checked").data();
                let gk = params.k_gain.as_ref().expect("checked").data();
                layernorm_rows_backward(
                    &cache.q_hat[hs.clone()],
                    &cache.q_inv_std[ls.clone()],
                    gq,
                    &dqh,
                    d,
                    &mut dtmp,
                    grads.q_gain.as_mut().expect("checked").data_mut(),
                );
                dqh.copy_from_slice(&dtmp);
                layernorm_rows_backward(
                    &cache.k_hat[hs.clone()],
                    &cache.k_inv_std[ls],
                    gk,
                    &dkh,
                    d,
                    &mut dtmp,
                    grads.k_gain.as_mut().expect("checked").data_mut(),
                );
                dkh.copy_from_slice(&dtmp);
            }
            scatter_head(&dqh, &mut dq, rows.clone(), col0, d, width);
            scatter_head(&dkh, &mut dk, rows.clone(), col0, d, width);
            scatter_head(&dvh, &mut dv, rows.clone(), col0, d, width);
        }
    }

    for (dproj, w, gw) in [
        (&dq, &params.wq, &mut grads.wq),
        (&dk, &params.wk, &mut grads.wk),
        (&dv, &params.wv, &mut grads.wv),
    ] {
        gemm_tn_acc(x, dproj, gw.data_mut(), n, width, width);
        let mut wt = vec![T::zero(); width * width];
        crate::tensor::transpose_into(w.data(), width, width, &mut wt);
        gemm_acc(dproj, &wt, &mut dx, n, width, width);
    }

    let dx = Tensor::from_parts(vec![n, width], dx);
    dx.ensure_finite("multihead_attention_backward")?;
    Ok((dx, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::finite_diff_grad;
    use crate::tensor::max_relative_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
        )
        .unwrap()
    }

    fn random_params(rng: &mut ChaCha8Rng, cfg: &AttentionConfig) -> AttentionParams<f64> {
        let w = cfg.width();
        let sc = 1.0 / (w as f64).sqrt() * 1.7;
        AttentionParams {
            wq: random(rng, &[w, w], sc),
            wk: random(rng, &[w, w], sc),
            wv: random(rng, &[w, w], sc),
            wo: random(rng, &[w, w], sc),
            wg: cfg.gated.then(|| random(rng, &[w, w], sc)),
            q_gain: cfg
                .qk_layernorm
                .then(|| random(rng, &[cfg.head_dim], 0.5).map(|v| v + 1.0)),
            k_gain: cfg
                .qk_layernorm
                .then(|| random(rng, &[cfg.head_dim], 0.5).map(|v| v + 1.0)),
        }
    }

    type Field = fn(&mut AttentionParams<f64>) -> Option<&mut Tensor<f64>>;

    const FIELDS: [(&str, Field); 7] = [
        ("wq", |p| Some(&mut p.wq)),
        ("wk", |p| Some(&mut p.wk)),
        ("wv", |p| Some(&mut p.wv)),
        ("wo", |p| Some(&mut p.wo)),
        ("wg", |p| p.wg.as_mut()),
        ("q_gain", |p| p.q_gain.as_mut()),
        ("k_gain", |p| p.k_gain.as_mut()),
    ];

    fn check_gradients(cfg: &AttentionConfig, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, batch) = (5, 2);
        let x = random(&mut rng, &[batch * l, cfg.width()], 1.0);
        let params = random_params(&mut rng, cfg);
        let loss = |x: &Tensor<f64>, p: &AttentionParams<f64>| {
            let (out, _) = multihead_attention_forward(x, l, p, cfg).unwrap();
            out.data().iter().map(|v| v * v).sum::<f64>()
        };
        let (out, cache) = multihead_attention_forward(&x, l, &params, cfg).unwrap();
        let dout = out.scale(2.0);
        let (dx, grads) = multihead_attention_backward(&cache, &params, cfg, &dout).unwrap();

        let fd = finite_diff_grad(|x| loss(x, &params), &x, 1e-4).unwrap();
        let err = max_relative_error(&dx, &fd);
        assert!(err < 1e-3, "{}: dx rel err {err}", cfg.label());

        for (name, field) in FIELDS {
            let mut probe = params.clone();
            let Some(t) = field(&mut probe) else { continue };
            let base = t.clone();
            let fd = finite_diff_grad(
                |v| {
                    let mut p = params.clone();
                    *field(&mut p).unwrap() = v.clone();
                    loss(&x, &p)
                },
                &base,
                1e-4,
            )
            .unwrap();
            let mut g = grads.clone();
            let analytic = field(&mut g).unwrap();
            let err = max_relative_error(analytic, &fd);
            assert!(err < 1e-3, "{}: {name} rel err {err}", cfg.label());
        }
    }

    #[test]
    fn gradients_match_oracle_all_configs() {
        for (i, h) in Activation::ALL.into_iter().enumerate() {
            for ln in [false, true] {
                for gate in [false, true] {
                    let cfg = AttentionConfig::new(h, 1.0, 2, 4).with_qk_layernorm(ln).with_gate(gate);
                    check_gradients(&cfg, 100 + i as u64);
                }
            }
        }
        check_gradients(&AttentionConfig::new(Activation::Relu, 0.5, 2, 4), 7);
    }

    #[test]
    fn single_token_softmax_is_identity() {
        let cfg = AttentionConfig::softmax(1, 3);
        let x = Tensor::<f64>::from_rows(&[&[0.2, -1.0, 4.0]]).unwrap();
        let out = multihead_attention(&x, &AttentionParams::identity(&cfg), &cfg).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn zero_gate_annihilates() {
        let cfg = AttentionConfig::relu_attention(2, 2).with_gate(true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = random_params(&mut rng, &cfg);
        params.wg = Some(Tensor::zeros([4, 4]));
        let x = random(&mut rng, &[6, 4], 1.0);
        let out = multihead_attention(&x, &params, &cfg).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_param_mismatch_is_named() {
        let cfg = AttentionConfig::relu_attention(1, 2);
        let x = Tensor::<f64>::zeros([3, 2]);
        let gated = cfg.clone().with_gate(true);
        let err = multihead_attention(&x, &AttentionParams::identity(&cfg), &gated).unwrap_err();
        assert!(err.to_string().contains("gate weights"), "{err}");
        let ln = cfg.clone().with_qk_layernorm(true);
        let err = multihead_attention(&x, &AttentionParams::identity(&cfg), &ln).unwrap_err();
        assert!(err.to_string().contains("qk-layernorm gains"), "{err}");
        let err = multihead_attention(&x, &AttentionParams::identity(&gated), &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn batched_equals_per_sequence() {
        let cfg = AttentionConfig::relu_attention(2, 3)
            .with_qk_layernorm(true)
            .with_gate(true);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = random_params(&mut rng, &cfg);
        let x = random(&mut rng, &[8, 6], 1.0);
        let (joint, _) = multihead_attention_forward(&x, 4, &params, &cfg).unwrap();
        for b in 0..2 {
            let xb = Tensor::new([4, 6], x.data()[b * 24..(b + 1) * 24].to_vec()).unwrap();
            let ob = multihead_attention(&xb, &params, &cfg).unwrap();
            assert_eq!(ob.data(), &joint.data()[b * 24..(b + 1) * 24]);
        }
    }
}
