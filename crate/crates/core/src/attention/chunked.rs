//! Sequence-parallel attention over key chunks.
//!
//! Each chunk of keys/values is processed independently (in parallel) and the
//! per-chunk results are then folded together in chunk-index order. The fold is
//! instrumented: [`ReductionStats`] counts what has to cross chunk boundaries.
//!
//! * point-wise φ: partial outputs are simply added, one additive reduction in total.
//! * softmax: online softmax. Every merge needs the running row max (a max-reduction),
//!   the running denominator (a sum-reduction) and a rescaled add of the outputs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{attention, phi_in_place_scaled, prepare_qk, scaled_scores, AttentionConfig, QkGains};
use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReductionStats {
    pub cross_chunk_additive_reductions: usize,
    pub cross_chunk_max_reductions: usize,
    pub cross_chunk_sum_reductions: usize,
    pub chunks: usize,
}

struct SoftmaxPartial<T> {
    /// Row maxima of the chunk's logits.
    max: Vec<f64>,
    /// Row sums of `exp(s - max)`.
    denom: Vec<f64>,
    /// Unnormalized `exp(s - max) · v_chunk`.
    out: Vec<T>,
}

/// Single-head attention computed over `⌈L / chunk_size⌉` key chunks.
///
/// With `chunk_size == L` this is exactly [`attention`]. The result is independent of how
/// many threads evaluate the chunks.
pub fn attention_chunked<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
    gains: Option<QkGains<'_, T>>,
    chunk_size: usize,
) -> Result<(Tensor<T>, ReductionStats)> {
    let (lk, _) = k.dims2("attention_chunked")?;
    let (lv, dv) = v.dims2("attention_chunked")?;
    if lv != lk {
        return Err(Error::Shape {
            op: "attention_chunked",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    if chunk_size == 0 || chunk_size > lk {
        return Err(Error::Usage(format!(
            "chunk_size must lie in [1, {lk}], got {chunk_size}"
        )));
    }
    let chunks = lk.div_ceil(chunk_size);
    if chunks == 1 {
        let out = attention(q, k, v, cfg, gains)?;
        return Ok((
            out,
            ReductionStats {
                chunks: 1,
                ..Default::default()
            },
        ));
    }

    let (q, k) = prepare_qk(q, k, cfg, gains)?;
    let (lq, d) = (q.shape()[0], q.shape()[1]);
    let ranges: Vec<(usize, usize)> = (0..chunks)
        .map(|c| (c * chunk_size, ((c + 1) * chunk_size).min(lk)))
        .collect();
    let chunk_of = |t: &Tensor<T>, cols: usize, (s, e): (usize, usize)| {
        Tensor::from_parts(vec![e - s, cols], t.data()[s * cols..e * cols].to_vec())
    };

    let mut stats = ReductionStats {
        chunks,
        ..Default::default()
    };
    let out = if cfg.activation == Activation::Softmax {
        let partials: Vec<SoftmaxPartial<T>> = ranges
            .par_iter()
            .map(|&r| {
                let kc = chunk_of(&k, d, r);
                let vc = chunk_of(v, dv, r);
                softmax_partial(&q, &kc, &vc)
            })
            .collect();
        let mut iter = partials.into_iter();
        let first = iter.next().expect("chunks > 1");
        let mut max = first.max;
        let mut denom = first.denom;
        let mut acc: Vec<f64> = first.out.iter().map(|v| v.f64()).collect();
        for p in iter {
            stats.cross_chunk_max_reductions += 1;
            stats.cross_chunk_sum_reductions += 1;
            stats.cross_chunk_additive_reductions += 1;
            for i in 0..lq {
                let m = max[i].max(p.max[i]);
                let a = (max[i] - m).exp();
                let b = (p.max[i] - m).exp();
                max[i] = m;
                denom[i] = a * denom[i] + b * p.denom[i];
                for (o, &po) in acc[i * dv..(i + 1) * dv].iter_mut().zip(&p.out[i * dv..(i + 1) * dv]) {
                    *o = a * *o + b * po.f64();
                }
            }
        }
        acc.chunks_exact(dv)
            .zip(&denom)
            .flat_map(|(row, &l)| row.iter().map(move |&o| T::of(o / l)))
            .collect()
    } else {
        let scale = cfg.seq_scale(lk);
        let partials: Vec<Vec<T>> = ranges
            .par_iter()
            .map(|&r| {
                let kc = chunk_of(&k, d, r);
                let vc = chunk_of(v, dv, r);
                let mut w = scaled_scores(&q, &kc).into_data();
                phi_in_place_scaled(&mut w, r.1 - r.0, cfg, scale);
                let mut o = vec![T::zero(); lq * dv];
                gemm(&w, vc.data(), &mut o, lq, r.1 - r.0, dv);
                o
            })
            .collect();
        stats.cross_chunk_additive_reductions = 1;
        let mut iter = partials.into_iter();
        let mut acc = iter.next().expect("chunks > 1");
        for p in iter {
            for (a, b) in acc.iter_mut().zip(p) {
                *a += b;
            }
        }
        acc
    };
    let out = Tensor::from_parts(vec![lq, dv], out);
    out.ensure_finite("attention_chunked")?;
    Ok((out, stats))
}

fn softmax_partial<T: Real>(q: &Tensor<T>, kc: &Tensor<T>, vc: &Tensor<T>) -> SoftmaxPartial<T> {
    let lq = q.shape()[0];
    let lc = kc.shape()[0];
    let dv = vc.shape()[1];
    let mut s = scaled_scores(q, kc).into_data();
    let mut max = Vec::with_capacity(lq);
    let mut denom = Vec::with_capacity(lq);
    for row in s.chunks_exact_mut(lc) {
        let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
        let mut l = 0.0;
        for v in row.iter_mut() {
            let e = (v.f64() - m).exp();
            l += e;
            *v = T::of(e);
        }
        max.push(m);
        denom.push(l);
    }
    let mut out = vec![T::zero(); lq * dv];
    gemm(&s, vc.data(), &mut out, lq, lc, dv);
    SoftmaxPartial { max, denom, out }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_relative_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, l: usize, d: usize) -> Tensor<f32> {
        Tensor::new([l, d], (0..l * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn single_chunk_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (
            gaussian(&mut rng, 12, 4),
            gaussian(&mut rng, 12, 4),
            gaussian(&mut rng, 12, 4),
        );
        for h in Activation::ALL {
            let cfg = AttentionConfig::new(h, 1.0, 1, 4);
            let (out, stats) = attention_chunked(&q, &k, &v, &cfg, None, 12).unwrap();
            assert_eq!(out, attention(&q, &k, &v, &cfg, None).unwrap());
            assert_eq!(
                stats,
                ReductionStats {
                    chunks: 1,
                    ..Default::default()
                }
            );
        }
    }

    #[test]
    fn relu_chunks_need_no_normalization_exchange() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k, v) = (
            gaussian(&mut rng, 64, 8),
            gaussian(&mut rng, 64, 8),
            gaussian(&mut rng, 64, 8),
        );
        let cfg = AttentionConfig::relu_attention(1, 8);
        let (out, stats) = attention_chunked(&q, &k, &v, &cfg, None, 16).unwrap();
        assert_eq!(stats.chunks, 4);
        assert_eq!(stats.cross_chunk_max_reductions, 0);
        assert_eq!(stats.cross_chunk_sum_reductions, 0);
        assert_eq!(stats.cross_chunk_additive_reductions, 1);
        let mono = attention(&q, &k, &v, &cfg, None).unwrap();
        assert!(max_relative_error(&out, &mono) < 1e-5);
    }

    #[test]
    fn softmax_chunks_exchange_max_and_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (q, k, v) = (
            gaussian(&mut rng, 64, 8),
            gaussian(&mut rng, 64, 8),
            gaussian(&mut rng, 64, 8),
        );
        let cfg = AttentionConfig::softmax(1, 8);
        let (out, stats) = attention_chunked(&q, &k, &v, &cfg, None, 16).unwrap();
        assert_eq!(stats.chunks, 4);
        assert_eq!(stats.cross_chunk_max_reductions, 3);
        assert_eq!(stats.cross_chunk_sum_reductions, 3);
        let mono = attention(&q, &k, &v, &cfg, None).unwrap();
        assert!(max_relative_error(&out, &mono) < 1e-5);
    }

    #[test]
    fn ragged_last_chunk_and_qk_layernorm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, k, v) = (
            gaussian(&mut rng, 49, 8),
            gaussian(&mut rng, 49, 8),
            gaussian(&mut rng, 49, 8),
        );
        let gq = Tensor::new([8], (0..8).map(|_| rng.random_range(0.5f32..1.5)).collect()).unwrap();
        let gk = Tensor::new([8], (0..8).map(|_| rng.random_range(0.5f32..1.5)).collect()).unwrap();
        for h in Activation::ALL {
            let cfg = AttentionConfig::new(h, 0.5, 1, 8).with_qk_layernorm(true);
            let gains = Some(QkGains { q: &gq, k: &gk });
            let (out, stats) = attention_chunked(&q, &k, &v, &cfg, gains, 7).unwrap();
            assert_eq!(stats.chunks, 7);
            let mono = attention(&q, &k, &v, &cfg, gains).unwrap();
            assert!(max_relative_error(&out, &mono) < 1e-5, "{h}");
        }
    }

    #[test]
    fn worker_count_does_not_change_result() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, k, v) = (
            gaussian(&mut rng, 64, 8),
            gaussian(&mut rng, 64, 8),
            gaussian(&mut rng, 64, 8),
        );
        for cfg in [AttentionConfig::softmax(1, 8), AttentionConfig::relu_attention(1, 8)] {
            let run = |threads| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .unwrap()
                    .install(|| attention_chunked(&q, &k, &v, &cfg, None, 5).unwrap())
            };
            assert_eq!(run(1), run(4));
        }
    }

    #[test]
    fn chunk_size_out_of_range() {
        let q = Tensor::<f32>::zeros([4, 2]);
        let cfg = AttentionConfig::relu_attention(1, 2);
        assert!(matches!(
            attention_chunked(&q, &q, &q, &cfg, None, 0),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            attention_chunked(&q, &q, &q, &cfg, None, 5),
            Err(Error::Usage(_))
        ));
    }
}
