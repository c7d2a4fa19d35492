//! Tables of Monte-Carlo mean attention weights at initialization.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::attention::{init_weight_statistics, AttentionConfig};
use crate::error::{Error, Result};

pub use crate::attention::MIN_TRIALS;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsSpec {
    pub head_dims: Vec<usize>,
    pub seq_lens: Vec<usize>,
    pub activations: Vec<Activation>,
    pub alphas: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for StatsSpec {
    fn default() -> Self {
        StatsSpec {
            head_dims: vec![64],
            seq_lens: vec![64, 128, 256],
            activations: vec![Activation::Softmax, Activation::Relu, Activation::Identity],
            alphas: vec![0.0, 1.0],
            trials: MIN_TRIALS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub activation: Activation,
    /// Empty for softmax, which ignores α.
    pub alpha: Option<f64>,
    pub d: usize,
    pub seq_len: usize,
    pub trials: usize,
    pub mean: f64,
    pub std_error: f64,
    /// `L^{-α} E[h(Z)]` for a standard-normal logit `Z`; empty where there is no closed form.
    pub gaussian_reference: Option<f64>,
}

/// Mean weight predicted when the logits are exactly standard normal.
pub fn gaussian_reference(activation: Activation, alpha: f64, seq_len: usize) -> Option<f64> {
    let l = seq_len as f64;
    let e = match activation {
        Activation::Softmax => return Some(1.0 / l),
        Activation::Relu => INV_SQRT_2PI,
        // E[Z² 1{Z>0}] = 1/2 by symmetry.
        Activation::ReluSquared => 0.5,
        // E[Z Φ(Z)] = E[φ(Z)] = 1/(2√π).
        Activation::Gelu => 0.5 / std::f64::consts::PI.sqrt(),
        Activation::Identity => 0.0,
        // E[relu(Z)] − E[(Z − 6)⁺] = 1/√(2π) − (φ(6) − 6 Q(6)).
        Activation::Relu6 => {
            let tail = INV_SQRT_2PI * (-18.0f64).exp() - 6.0 * 0.5 * libm::erfc(6.0 / std::f64::consts::SQRT_2);
            INV_SQRT_2PI - tail
        }
        Activation::Sigmoid => 0.5,
        Activation::Softplus => return None,
    };
    Some(l.powf(-alpha) * e)
}

/// One row per (activation, α, d, L). Softmax contributes one row per (d, L).
pub fn run_stats(spec: &StatsSpec) -> Result<Vec<StatsRow>> {
    if spec.trials < MIN_TRIALS {
        return Err(Error::Usage(format!(
            "stats needs at least {MIN_TRIALS} trials, got {}",
            spec.trials
        )));
    }
    if spec.head_dims.is_empty() || spec.seq_lens.is_empty() || spec.activations.is_empty() {
        return Err(Error::Usage("stats needs at least one d, L and activation".into()));
    }
    if spec.alphas.is_empty() || spec.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::Usage("stats alphas must be a non-empty subset of [0, 1]".into()));
    }
    let mut jobs = Vec::new();
    for &activation in &spec.activations {
        let alphas: Vec<Option<f64>> = if activation == Activation::Softmax {
            vec![None]
        } else {
            spec.alphas.iter().copied().map(Some).collect()
        };
        for alpha in alphas {
            for &d in &spec.head_dims {
                for &seq_len in &spec.seq_lens {
                    jobs.push((activation, alpha, d, seq_len));
                }
            }
        }
    }
    jobs.par_iter()
        .enumerate()
        .map(|(i, &(activation, alpha, d, seq_len))| {
            let cfg = AttentionConfig::new(activation, alpha.unwrap_or(0.0), 1, d);
            let s = init_weight_statistics(d, seq_len, &cfg, spec.trials, spec.seed.wrapping_add(i as u64))?;
            Ok(StatsRow {
                activation,
                alpha,
                d,
                seq_len,
                trials: s.trials,
                mean: s.mean,
                std_error: s.std_error,
                gaussian_reference: gaussian_reference(activation, alpha.unwrap_or(0.0), seq_len),
            })
        })
        .collect()
}

pub fn write_stats_csv(rows: &[StatsRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_stats_csv(path: &Path) -> Result<Vec<StatsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
