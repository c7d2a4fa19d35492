//! End-to-end gradient verification of the ViT against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::oracle::finite_diff_grad;
use crate::tensor::{max_relative_error, Tensor};
use crate::vit::{attention_kink_margin, cross_entropy, loss_and_grad, vit_forward, ParamKind, ViTConfig, ViTParams};

pub const TOLERANCE: f64 = 1e-3;
pub const STEP: f64 = 1e-4;
/// Draws whose attention logits come closer than this to a kink are rejected.
pub const KINK_MARGIN: f64 = 1e-2;
const MAX_DRAWS: u64 = 256;
const LABELS: [usize; 2] = [3, 7];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub activation: Activation,
    pub qk_layernorm: bool,
    pub gated: bool,
}

impl Cell {
    pub fn label(&self) -> String {
        format!(
            "{}/ln{}/g{}",
            self.activation,
            u8::from(self.qk_layernorm),
            u8::from(self.gated)
        )
    }

    /// Depth 2, 28×28×1 images cut into 14×14 patches (L = 4).
    pub fn vit_config(&self) -> ViTConfig {
        ViTConfig {
            image_size: 28,
            channels: 1,
            patch_size: 14,
            width: 8,
            depth: 2,
            num_heads: 2,
            mlp_dim: 16,
            num_classes: 10,
            attention: AttentionConfig::new(self.activation, 1.0, 2, 4)
                .with_qk_layernorm(self.qk_layernorm)
                .with_gate(self.gated),
        }
    }
}

/// Every activation × qk-layernorm × gate.
pub fn full_matrix() -> Vec<Cell> {
    let mut cells = Vec::with_capacity(32);
    for activation in Activation::ALL {
        for qk_layernorm in [false, true] {
            for gated in [false, true] {
                cells.push(Cell {
                    activation,
                    qk_layernorm,
                    gated,
                });
            }
        }
    }
    cells
}

/// Keeps the cells whose label matches `filter`. Fields may be omitted:
/// `relu`, `relu/ln1`, `softmax/ln0/g1`.
pub fn filter_cells(cells: &[Cell], filter: &str) -> Result<Vec<Cell>> {
    let mut parts = filter.split('/');
    let activation: Activation = parts
        .next()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Usage("empty gradcheck filter".into()))?
        .parse()?;
    let mut ln = None;
    let mut gate = None;
    for part in parts {
        let flag = |p: &str| match p {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(Error::Usage(format!("bad flag in gradcheck filter {filter:?}"))),
        };
        if let Some(v) = part.strip_prefix("ln") {
            ln = Some(flag(v)?);
        } else if let Some(v) = part.strip_prefix('g') {
            gate = Some(flag(v)?);
        } else {
            return Err(Error::Usage(format!(
                "unknown field {part:?} in gradcheck filter; expected e.g. relu/ln1/g0"
            )));
        }
    }
    let kept: Vec<Cell> = cells
        .iter()
        .copied()
        .filter(|c| {
            c.activation == activation && ln.is_none_or(|v| c.qk_layernorm == v) && gate.is_none_or(|v| c.gated == v)
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::Usage(format!("gradcheck filter {filter:?} matches no cell")));
    }
    Ok(kept)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamError {
    pub name: String,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: String,
    /// Index of the accepted random draw (parameters and images).
    pub draw: u64,
    /// Distance of the closest attention logit to a kink of h; `None` when h is smooth.
    pub kink_margin: Option<f64>,
    pub params: Vec<ParamError>,
    pub max_relative_error: f64,
    pub worst_param: String,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Options {
    /// Perturbs one analytic derivative before comparison, to prove the harness can fail.
    pub corrupt: bool,
    /// Seed of the first random draw tried for each cell.
    pub first_draw: u64,
}

fn draw(cfg: &ViTConfig, seed: u64) -> Result<(ViTParams<f64>, Tensor<f64>)> {
    let mut params = ViTParams::<f64>::init_with_std(cfg, seed, 0.3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, kind, t) in params.named_mut() {
        if kind == ParamKind::Gain || kind == ParamKind::Bias {
            let base = if kind == ParamKind::Gain { 1.0 } else { 0.0 };
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = base + rng.random_range(-0.3..0.3));
        }
    }
    let n = LABELS.len() * cfg.image_size * cfg.image_size * cfg.channels;
    let images = Tensor::new(
        [LABELS.len(), cfg.image_size, cfg.image_size, cfg.channels],
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    Ok((params, images))
}

/// Checks every parameter tensor of one cell.
pub fn check_cell(cell: &Cell, opts: Options) -> Result<CellReport> {
    let cfg = cell.vit_config();
    let mut accepted = None;
    for seed in opts.first_draw..opts.first_draw.saturating_add(MAX_DRAWS) {
        let (params, images) = draw(&cfg, seed)?;
        let margin = attention_kink_margin(&params, &images, &cfg)?;
        if margin >= KINK_MARGIN {
            accepted = Some((seed, margin, params, images));
            break;
        }
    }
    let Some((seed, margin, params, images)) = accepted else {
        return Err(Error::Config(format!(
            "{}: no kink-free draw within {MAX_DRAWS} attempts",
            cell.label()
        )));
    };

    let (_, mut grads) = loss_and_grad(&params, &images, &LABELS, &cfg)?;
    if opts.corrupt {
        let head = grads.head_w.data_mut();
        head[0] += 0.01 * head.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-3);
    }

    let mut reports = Vec::new();
    let names: Vec<String> = params.named().into_iter().map(|(n, _, _)| n).collect();
    let analytic = grads.named();
    for (idx, name) in names.iter().enumerate() {
        let base = params.named()[idx].2.clone();
        let fd = finite_diff_grad(
            |v| {
                let mut p = params.clone();
                *p.named_mut().swap_remove(idx).2 = v.clone();
                vit_forward(&p, &images, &cfg)
                    .and_then(|logits| cross_entropy(&logits, &LABELS))
                    .unwrap_or(f64::NAN)
            },
            &base,
            STEP,
        )?;
        reports.push(ParamError {
            name: name.clone(),
            max_relative_error: max_relative_error(analytic[idx].2, &fd),
        });
    }
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
        .expect("at least one parameter");
    let max_err = worst.max_relative_error;
    Ok(CellReport {
        cell: cell.label(),
        draw: seed,
        kink_margin: margin.is_finite().then_some(margin),
        worst_param: worst.name.clone(),
        max_relative_error: max_err,
        passed: max_err < TOLERANCE,
        params: reports,
    })
}

/// Runs `cells` in parallel on the current rayon pool, preserving order.
pub fn run(cells: &[Cell], opts: Options) -> Result<Vec<CellReport>> {
    use rayon::prelude::*;
    cells.par_iter().map(|c| check_cell(c, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_has_32_distinct_cells() {
        let cells = full_matrix();
        assert_eq!(cells.len(), 32);
        let mut labels: Vec<String> = cells.iter().map(Cell::label).collect();
        labels.sort();
        labels.dedup();
        assert_eq!(labels.len(), 32);
        assert_eq!(cells[0].vit_config().seq_len(), 4);
    }

    #[test]
    fn filters() {
        let cells = full_matrix();
        assert_eq!(filter_cells(&cells, "relu").unwrap().len(), 4);
        assert_eq!(filter_cells(&cells, "relu/ln1").unwrap().len(), 2);
        let one = filter_cells(&cells, "softmax/ln0/g1").unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].label(), "softmax/ln0/g1");
        assert!(filter_cells(&cells, "relu/x1").is_err());
        assert!(filter_cells(&cells, "tanh").is_err());
    }

    #[test]
    fn single_cell_passes_and_corruption_fails() {
        let cell = Cell {
            activation: Activation::Relu,
            qk_layernorm: true,
            gated: true,
        };
        let report = check_cell(&cell, Options::default()).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.kink_margin.unwrap() >= KINK_MARGIN);
        let bad = check_cell(
            &cell,
            Options {
                corrupt: true,
                ..Options::default()
            },
        )
        .unwrap();
        assert!(!bad.passed);
        assert_eq!(bad.worst_param, "head.w");
    }
}
