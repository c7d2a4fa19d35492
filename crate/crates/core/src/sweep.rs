//! Grids of training runs over φ, α, qk-layernorm and gating.
//!
//! Every cell writes into its own directory under `<out>/cells/`. A cell whose
//! `runrecord.json` already exists is not rerun, so an interrupted sweep resumes
//! where it stopped. Failed cells leave a `failure.txt` and are retried next time.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::train::{train, Outputs, RunRecord, TrainConfig, TrainData, RECORD_FILE};

pub const CSV_FILE: &str = "sweep.csv";
pub const FAILURE_FILE: &str = "failure.txt";

pub fn default_alphas() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

fn default_flags() -> Vec<bool> {
    vec![false]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    pub activations: Vec<Activation>,
    #[serde(default = "default_flags")]
    pub qk_layernorm: Vec<bool>,
    #[serde(default = "default_flags")]
    pub gated: Vec<bool>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Everything except φ, α, the two ablation flags and the seed.
    pub base: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepCell {
    pub activation: Activation,
    pub alpha: f64,
    pub qk_layernorm: bool,
    pub gated: bool,
    pub seed: u64,
}

impl SweepCell {
    /// Directory name, e.g. `relu_a0.50_ln1_g0_s3`.
    pub fn key(&self) -> String {
        format!(
            "{}_a{:.2}_ln{}_g{}_s{}",
            self.activation,
            self.alpha,
            u8::from(self.qk_layernorm),
            u8::from(self.gated),
            self.seed
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub activation: Activation,
    pub alpha: f64,
    pub qk_ln: bool,
    pub gated: bool,
    pub seed: u64,
    /// Empty when the cell failed.
    pub final_accuracy: Option<f64>,
    pub core_seconds: Option<f64>,
}

/// Outcome of one cell in this invocation.
#[derive(Debug)]
pub enum CellOutcome {
    Trained(Box<RunRecord>),
    Skipped(Box<RunRecord>),
    Failed(Error),
}

impl CellOutcome {
    pub fn record(&self) -> Option<&RunRecord> {
        match self {
            CellOutcome::Trained(r) | CellOutcome::Skipped(r) => Some(r),
            CellOutcome::Failed(_) => None,
        }
    }
}

#[derive(Debug)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub outcomes: Vec<CellOutcome>,
    pub csv_path: PathBuf,
}

impl SweepResult {
    pub fn failures(&self) -> impl Iterator<Item = (&SweepCell, &Error)> {
        self.cells.iter().zip(&self.outcomes).filter_map(|(c, o)| match o {
            CellOutcome::Failed(e) => Some((c, e)),
            _ => None,
        })
    }
}

impl SweepSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let spec: SweepSpec = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::Config(format!(
                "line {} column {}, field `{path}`: {inner}",
                inner.line(),
                inner.column()
            ))
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("alphas", self.alphas.is_empty()),
            ("activations", self.activations.is_empty()),
            ("qk_layernorm", self.qk_layernorm.is_empty()),
            ("gated", self.gated.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Config(format!("sweep `{name}` must not be empty")));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
        }
        self.base.validate()
    }

    pub fn cardinality(&self) -> usize {
        self.alphas.len() * self.activations.len() * self.qk_layernorm.len() * self.gated.len() * self.seeds.len()
    }

    /// All cells, activation-major, seed innermost.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut out = Vec::with_capacity(self.cardinality());
        for &activation in &self.activations {
            for &alpha in &self.alphas {
                for &qk_layernorm in &self.qk_layernorm {
                    for &gated in &self.gated {
                        for &seed in &self.seeds {
                            out.push(SweepCell {
                                activation,
                                alpha,
                                qk_layernorm,
                                gated,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn train_config(&self, cell: &SweepCell) -> TrainConfig {
        let mut cfg = self.base.clone();
        cfg.vit = cfg
            .vit
            .with_phi(cell.activation, cell.alpha)
            .with_qk_layernorm(cell.qk_layernorm)
            .with_gate(cell.gated);
        cfg.seed = cell.seed;
        cfg
    }
}

fn run_cell(spec: &SweepSpec, cell: &SweepCell, train_split: &Dataset, test: &Dataset, dir: &Path) -> CellOutcome {
    let record_path = dir.join(RECORD_FILE);
    if record_path.exists() {
        match RunRecord::read_json(&record_path) {
            Ok(r) => return CellOutcome::Skipped(Box::new(r)),
            Err(e) => return CellOutcome::Failed(e),
        }
    }
    let cfg = spec.train_config(cell);
    let result = TrainData::from_splits(&cfg, train_split, test.clone())
        .and_then(|data| train(&cfg, &data, &Outputs::to_dir(dir)));
    match result {
        Ok(r) => {
            let _ = fs::remove_file(dir.join(FAILURE_FILE));
            CellOutcome::Trained(Box::new(r))
        }
        Err(e) => {
            if fs::create_dir_all(dir).is_ok() {
                let _ = fs::write(dir.join(FAILURE_FILE), format!("{e}\n"));
            }
            CellOutcome::Failed(e)
        }
    }
}

/// Runs every cell not already recorded under `out_dir` and writes `sweep.csv`.
///
/// Cells run concurrently on the current rayon pool. `progress` is called once per
/// finished cell, in completion order.
pub fn run_sweep(
    spec: &SweepSpec,
    train_split: &Dataset,
    test: &Dataset,
    out_dir: &Path,
    progress: &(dyn Fn(&SweepCell, &CellOutcome) + Sync),
) -> Result<SweepResult> {
    spec.validate()?;
    let cells_dir = out_dir.join("cells");
    fs::create_dir_all(&cells_dir).map_err(|e| Error::io(&cells_dir, e))?;
    let cells = spec.cells();
    let outcomes: Vec<CellOutcome> = cells
        .par_iter()
        .map(|cell| {
            let outcome = run_cell(spec, cell, train_split, test, &cells_dir.join(cell.key()));
            progress(cell, &outcome);
            outcome
        })
        .collect();

    let csv_path = out_dir.join(CSV_FILE);
    let mut w = csv::Writer::from_path(&csv_path)?;
    for (cell, outcome) in cells.iter().zip(&outcomes) {
        let record = outcome.record();
        w.serialize(SweepRow {
            activation: cell.activation,
            alpha: cell.alpha,
            qk_ln: cell.qk_layernorm,
            gated: cell.gated,
            seed: cell.seed,
            final_accuracy: record.map(|r| r.final_accuracy),
            core_seconds: record.map(|r| r.core_seconds),
        })?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(SweepResult {
        cells,
        outcomes,
        csv_path,
    })
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
