//! Monte-Carlo estimate of the mean attention weight at initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{phi_in_place, AttentionConfig};
use crate::error::{Error, Result};
use crate::tensor::gemm_nt;

pub const MIN_TRIALS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitStats {
    /// Mean over trials of the average weight `E_j[α_ij]` (averaged over all rows `i`).
    pub mean: f64,
    /// Standard error of `mean` across trials.
    pub std_error: f64,
    pub trials: usize,
}

/// Draws `q, k ∈ R^{L×d}` with i.i.d. standard-normal entries, as after qk-layernorm,
/// and averages the resulting attention weights.
pub fn init_weight_statistics(
    d: usize,
    seq_len: usize,
    cfg: &AttentionConfig,
    trials: usize,
    seed: u64,
) -> Result<InitStats> {
    if trials < MIN_TRIALS {
        return Err(Error::Usage(format!("need at least {MIN_TRIALS} trials, got {trials}")));
    }
    if d == 0 || seq_len == 0 {
        return Err(Error::Usage("d and L must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inv_sqrt_d = 1.0 / (d as f32).sqrt();
    let mut q = vec![0f32; seq_len * d];
    let mut k = vec![0f32; seq_len * d];
    let mut w = vec![0f32; seq_len * seq_len];
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for _ in 0..trials {
        q.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
        k.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
        gemm_nt(&q, &k, &mut w, seq_len, d, seq_len);
        w.iter_mut().for_each(|x| *x *= inv_sqrt_d);
        phi_in_place(&mut w, seq_len, cfg);
        let m = w.iter().map(|&x| x as f64).sum::<f64>() / w.len() as f64;
        sum += m;
        sum_sq += m * m;
    }
    let n = trials as f64;
    let mean = sum / n;
    let var = ((sum_sq / n - mean * mean) * n / (n - 1.0)).max(0.0);
    Ok(InitStats {
        mean,
        std_error: (var / n).sqrt(),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;

    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

    #[test]
    fn softmax_mean_is_one_over_l() {
        let s = init_weight_statistics(16, 32, &AttentionConfig::softmax(1, 16), 1000, 0).unwrap();
        assert!((s.mean - 1.0 / 32.0).abs() < 1e-9, "{}", s.mean);
    }

    #[test]
    fn relu_scaled_by_l_and_unscaled() {
        let scaled = init_weight_statistics(64, 128, &AttentionConfig::relu_attention(1, 64), 1000, 1).unwrap();
        let expected = INV_SQRT_2PI / 128.0;
        assert!((scaled.mean - expected).abs() / expected < 0.1, "{}", scaled.mean);

        let unscaled =
            init_weight_statistics(64, 128, &AttentionConfig::new(Activation::Relu, 0.0, 1, 64), 1000, 1).unwrap();
        assert!((unscaled.mean - INV_SQRT_2PI).abs() / INV_SQRT_2PI < 0.1);
    }

    #[test]
    fn relu_squared_is_positive_and_finite() {
        let s = init_weight_statistics(
            8,
            16,
            &AttentionConfig::new(Activation::ReluSquared, 1.0, 1, 8),
            1000,
            2,
        )
        .unwrap();
        assert!(s.mean > 0.0 && s.mean.is_finite());
    }

    #[test]
    fn rejects_too_few_trials() {
        assert!(init_weight_statistics(8, 8, &AttentionConfig::softmax(1, 8), 999, 0).is_err());
    }
}
