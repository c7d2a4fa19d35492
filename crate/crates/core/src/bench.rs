//! Wall-clock benchmarks of chunked attention and of the reassociated linear kernel.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::attention::{
    attention, attention_chunked, linear_attention_reordered, linear_attention_unreordered, AttentionConfig,
    ReductionStats,
};
use crate::error::{Error, Result};
use crate::tensor::{max_relative_error, Tensor};

pub const MIN_REPS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub seq_lens: Vec<usize>,
    pub head_dim: usize,
    pub activations: Vec<Activation>,
    /// Chunk sizes larger than a sequence length are skipped for that length.
    pub chunk_sizes: Vec<usize>,
    pub reps: usize,
    /// Sequence lengths for the reordered vs unreordered linear kernel.
    pub linear_seq_lens: Vec<usize>,
    pub linear_head_dim: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            seq_lens: vec![64, 256, 1024],
            head_dim: 64,
            activations: vec![Activation::Softmax, Activation::Relu],
            chunk_sizes: vec![16, 64, 256],
            reps: 5,
            linear_seq_lens: vec![64, 256, 1024, 4096],
            linear_head_dim: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkedEntry {
    pub activation: Activation,
    pub seq_len: usize,
    pub chunk_size: usize,
    pub median_seconds: f64,
    pub monolithic_median_seconds: f64,
    pub stats: ReductionStats,
    /// Max relative deviation from the monolithic kernel.
    pub max_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearEntry {
    pub seq_len: usize,
    pub head_dim: usize,
    pub reordered_median_seconds: f64,
    pub unreordered_median_seconds: f64,
    pub max_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub spec: BenchSpec,
    pub threads: usize,
    pub chunked: Vec<ChunkedEntry>,
    pub linear: Vec<LinearEntry>,
}

pub fn median(xs: &mut [f64]) -> f64 {
    assert!(!xs.is_empty(), "median of nothing");
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median wall time of `reps` calls of `f`, after one untimed warm-up call.
pub fn time_median<R>(reps: usize, mut f: impl FnMut() -> R) -> f64 {
    std::hint::black_box(f());
    let mut times: Vec<f64> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(f());
            t.elapsed().as_secs_f64()
        })
        .collect();
    median(&mut times)
}

pub fn random_qkv(seq_len: usize, d: usize, seed: u64) -> [Tensor<f32>; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || {
        let data = (0..seq_len * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_parts(vec![seq_len, d], data)
    };
    [draw(), draw(), draw()]
}

pub fn bench_linear(seq_len: usize, d: usize, reps: usize, seed: u64) -> Result<LinearEntry> {
    let [q, k, v] = random_qkv(seq_len, d, seed);
    let reordered = linear_attention_reordered(&q, &k, &v)?;
    let unreordered = linear_attention_unreordered(&q, &k, &v)?;
    Ok(LinearEntry {
        seq_len,
        head_dim: d,
        reordered_median_seconds: time_median(reps, || linear_attention_reordered(&q, &k, &v)),
        unreordered_median_seconds: time_median(reps, || linear_attention_unreordered(&q, &k, &v)),
        max_deviation: max_relative_error(&reordered, &unreordered),
    })
}

pub fn run_bench(spec: &BenchSpec) -> Result<BenchReport> {
    if spec.reps < MIN_REPS {
        return Err(Error::Usage(format!(
            "bench needs at least {MIN_REPS} reps, got {}",
            spec.reps
        )));
    }
    if spec.head_dim == 0 || spec.linear_head_dim == 0 {
        return Err(Error::Usage("head dimensions must be positive".into()));
    }
    if spec.seq_lens.contains(&0) || spec.linear_seq_lens.contains(&0) || spec.chunk_sizes.contains(&0) {
        return Err(Error::Usage("sequence lengths and chunk sizes must be positive".into()));
    }
    let mut chunked = Vec::new();
    for &activation in &spec.activations {
        let cfg = AttentionConfig::new(activation, 1.0, 1, spec.head_dim);
        for &seq_len in &spec.seq_lens {
            let [q, k, v] = random_qkv(seq_len, spec.head_dim, spec.seed ^ seq_len as u64);
            let mono = attention(&q, &k, &v, &cfg, None)?;
            let mono_time = time_median(spec.reps, || attention(&q, &k, &v, &cfg, None));
            for &chunk_size in spec.chunk_sizes.iter().filter(|&&c| c <= seq_len) {
                let (out, stats) = attention_chunked(&q, &k, &v, &cfg, None, chunk_size)?;
                chunked.push(ChunkedEntry {
                    activation,
                    seq_len,
                    chunk_size,
                    median_seconds: time_median(spec.reps, || attention_chunked(&q, &k, &v, &cfg, None, chunk_size)),
                    monolithic_median_seconds: mono_time,
                    stats,
                    max_deviation: max_relative_error(&out, &mono),
                });
            }
        }
    }
    let linear = spec
        .linear_seq_lens
        .iter()
        .map(|&l| bench_linear(l, spec.linear_head_dim, spec.reps, spec.seed ^ l as u64))
        .collect::<Result<_>>()?;
    Ok(BenchReport {
        spec: spec.clone(),
        threads: rayon::current_num_threads(),
        chunked,
        linear,
    })
}
