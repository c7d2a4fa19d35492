//! AdamW training with linear warmup and cosine decay, evaluation and run records.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{self, batches, gather_batch, subset, Dataset, DatasetName, Split};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::vit::{loss_and_grad, vit_forward, ViTConfig, ViTParams};

pub const EVAL_BATCH: usize = 250;

fn default_lr() -> f64 {
    1e-3
}
fn default_wd() -> f64 {
    0.1
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_warmup_fraction() -> f64 {
    0.05
}
fn default_batch() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub vit: ViTConfig,
    pub dataset: DatasetName,
    /// Stratified training subset size; `None` uses the whole training split.
    #[serde(default)]
    pub train_subset: Option<usize>,
    /// Stratified test subset used for the per-epoch accuracy; `None` uses the whole test split.
    /// The final accuracy always uses the whole test split.
    #[serde(default)]
    pub eval_subset: Option<usize>,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    /// Defaults to `warmup_fraction` of the total step count.
    #[serde(default)]
    pub warmup_steps: Option<usize>,
    #[serde(default = "default_warmup_fraction")]
    pub warmup_fraction: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(vit: ViTConfig, dataset: DatasetName, epochs: usize) -> Self {
        TrainConfig {
            vit,
            dataset,
            train_subset: None,
            eval_subset: None,
            epochs,
            batch_size: default_batch(),
            base_lr: default_lr(),
            warmup_steps: None,
            warmup_fraction: default_warmup_fraction(),
            weight_decay: default_wd(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            seed: 0,
        }
    }

    /// Parses JSON, reporting the failing field path and line.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: TrainConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::Config(format!(
                "line {} column {}, field `{path}`: {inner}",
                inner.line(),
                inner.column()
            ))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, train_len: usize) -> usize {
        self.epochs * self.steps_per_epoch(train_len)
    }

    pub fn warmup(&self, total: usize) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| (self.warmup_fraction * total as f64).round() as usize)
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            lr: self.base_lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1)");
        }
        if self.train_subset == Some(0) || self.eval_subset == Some(0) {
            return bad("subset sizes must be positive");
        }
        Ok(())
    }

    /// Fails when the warmup would not end before training does.
    pub fn check_steps(&self, train_len: usize) -> Result<()> {
        let total = self.total_steps(train_len);
        let warmup = self.warmup(total);
        if total > 0 && warmup >= total {
            return Err(Error::Config(format!(
                "warmup_steps {warmup} must be below the total step count {total}"
            )));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup` steps, then cosine decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, base_lr: f64) -> f64 {
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: ViTParams<T>,
    pub v: ViTParams<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ViTParams<T>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected AdamW update of a flat parameter slice (`step ≥ 1`), computed in `f64`.
pub fn adamw_update<T: Real>(p: &mut [T], g: &[T], m: &mut [T], v: &mut [T], hyper: &AdamW, step: usize, decay: bool) {
    let t = step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let shrink = if decay {
        1.0 - hyper.lr * hyper.weight_decay
    } else {
        1.0
    };
    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        let g = g.f64();
        let mn = hyper.beta1 * m.f64() + (1.0 - hyper.beta1) * g;
        let vn = hyper.beta2 * v.f64() + (1.0 - hyper.beta2) * g * g;
        let update = (mn / bc1) / ((vn / bc2).sqrt() + hyper.eps);
        *p = T::of(p.f64() * shrink - hyper.lr * update);
        *m = T::of(mn);
        *v = T::of(vn);
    }
}

/// AdamW over every parameter; decay is skipped for gains and position embeddings.
pub fn adamw_step<T: Real>(
    params: &mut ViTParams<T>,
    grads: &ViTParams<T>,
    state: &mut AdamState<T>,
    hyper: &AdamW,
    step: usize,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Usage("adamw steps are counted from 1".into()));
    }
    let grads = grads.named();
    for (name, _, g) in &grads {
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { name: name.clone() });
        }
    }
    let ps = params.named_mut();
    let ms = state.m.named_mut();
    let vs = state.v.named_mut();
    if ps.len() != grads.len() || ms.len() != ps.len() || vs.len() != ps.len() {
        return Err(Error::Config("parameter, gradient and state layouts differ".into()));
    }
    for ((((_, kind, p), (_, _, g)), (_, _, m)), (_, _, v)) in ps.into_iter().zip(&grads).zip(ms).zip(vs) {
        if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(Error::Shape {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        adamw_update(
            p.data_mut(),
            g.data(),
            m.data_mut(),
            v.data_mut(),
            hyper,
            step,
            kind.decays(),
        );
        if let Some(index) = p.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op: "adamw_step",
                index,
            });
        }
    }
    Ok(())
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of examples whose argmax logit equals the label. Batches run in parallel;
/// only integer counts are combined, so the result does not depend on scheduling.
pub fn evaluate(params: &ViTParams<f32>, ds: &Dataset, cfg: &ViTConfig) -> Result<f64> {
    use rayon::prelude::*;
    if ds.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let correct: usize = idx
        .par_chunks(EVAL_BATCH)
        .map(|chunk| -> Result<usize> {
            let (x, y) = gather_batch(ds, chunk);
            let logits = vit_forward(params, &x, cfg)?;
            let k = cfg.num_classes;
            Ok(logits
                .data()
                .chunks_exact(k)
                .zip(&y)
                .filter(|(row, &label)| argmax(row) == label)
                .count())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / ds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_accuracy: f64,
    /// Wall-clock seconds of the epoch's optimizer steps.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub seed: u64,
    pub param_count: usize,
    pub train_examples: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    /// Accuracy of the initial parameters on the per-epoch evaluation set.
    pub init_accuracy: f64,
    pub epochs: Vec<EpochRecord>,
    /// Training loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Accuracy on the full test split after the last epoch.
    pub final_accuracy: f64,
    /// CPU seconds of the thread that ran forward/backward/update, excluding evaluation.
    pub core_seconds: f64,
    pub wall_seconds: f64,
}

impl RunRecord {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Training and test splits, already reduced to the configured subsets.
pub struct TrainData {
    pub train: Dataset,
    pub eval: Dataset,
    pub test: Dataset,
}

impl TrainData {
    pub fn load(cfg: &TrainConfig, data_dir: &Path) -> Result<Self> {
        let train = data::load(cfg.dataset, data_dir, Split::Train)?;
        let test = data::load(cfg.dataset, data_dir, Split::Test)?;
        Self::from_splits(cfg, &train, test)
    }

    /// Applies the configured subsets to already-loaded splits.
    pub fn from_splits(cfg: &TrainConfig, full_train: &Dataset, test: Dataset) -> Result<Self> {
        let train = match cfg.train_subset {
            Some(n) => subset(full_train, n, cfg.seed)?,
            None => full_train.clone(),
        };
        let eval = match cfg.eval_subset {
            Some(n) => subset(&test, n, cfg.seed)?,
            None => test.clone(),
        };
        Ok(TrainData { train, eval, test })
    }
}

/// Where a run writes its record, checkpoint and step stream.
#[derive(Clone, Debug, Default)]
pub struct Outputs {
    pub dir: Option<PathBuf>,
    /// Called after each epoch's evaluation.
    pub on_epoch: Option<fn(&EpochRecord)>,
}

impl Outputs {
    pub fn to_dir(dir: impl Into<PathBuf>) -> Self {
        Outputs {
            dir: Some(dir.into()),
            on_epoch: None,
        }
    }
}

pub const RECORD_FILE: &str = "runrecord.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const STEPS_FILE: &str = "steps.csv";

#[derive(Serialize)]
struct StepRow {
    step: usize,
    loss: f64,
    lr: f64,
}

/// Seconds of CPU time consumed by the calling thread.
pub fn thread_cpu_seconds() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid, writable timespec.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return f64::NAN;
    }
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (epoch as u64 + 1)
}

/// Trains from `ViTParams::init(seed)`; deterministic given the config.
pub fn train(cfg: &TrainConfig, data: &TrainData, out: &Outputs) -> Result<RunRecord> {
    cfg.validate()?;
    cfg.check_steps(data.train.len())?;
    let [h, w, c] = data.train.image_shape();
    if h != cfg.vit.image_size || w != cfg.vit.image_size || c != cfg.vit.channels {
        return Err(Error::Config(format!(
            "dataset images are {h}×{w}×{c} but the model expects {0}×{0}×{1}",
            cfg.vit.image_size, cfg.vit.channels
        )));
    }
    if let Some(dir) = &out.dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut steps_csv = match &out.dir {
        Some(dir) => Some(csv::Writer::from_path(dir.join(STEPS_FILE))?),
        None => None,
    };

    let wall = Instant::now();
    let mut params = ViTParams::<f32>::init(&cfg.vit, cfg.seed)?;
    let mut state = AdamState::new(&params);
    let total = cfg.total_steps(data.train.len());
    let warmup = cfg.warmup(total);
    let mut hyper = cfg.adamw();
    let init_accuracy = evaluate(&params, &data.eval, &cfg.vit)?;

    let mut step = 0;
    let mut core_seconds = 0.0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(total);
    for epoch in 0..cfg.epochs {
        let epoch_wall = Instant::now();
        let cpu0 = thread_cpu_seconds();
        let mut loss_sum = 0.0;
        let mut count = 0;
        for (x, y) in batches(&data.train, cfg.batch_size, epoch_seed(cfg.seed, epoch))? {
            step += 1;
            let (loss, grads) = loss_and_grad(&params, &x, &y, &cfg.vit)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            hyper.lr = lr_at(step, total, warmup, cfg.base_lr);
            adamw_step(&mut params, &grads, &mut state, &hyper, step)?;
            step_losses.push(loss);
            loss_sum += loss;
            count += 1;
            if let Some(csv) = steps_csv.as_mut() {
                csv.serialize(StepRow {
                    step,
                    loss,
                    lr: hyper.lr,
                })?;
            }
        }
        core_seconds += thread_cpu_seconds() - cpu0;
        let seconds = epoch_wall.elapsed().as_secs_f64();
        if let Some(csv) = steps_csv.as_mut() {
            csv.flush().map_err(|e| Error::io(STEPS_FILE, e))?;
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / count as f64,
            eval_accuracy: evaluate(&params, &data.eval, &cfg.vit)?,
            seconds,
        };
        if let Some(f) = out.on_epoch {
            f(&rec);
        }
        epochs.push(rec);
    }
    let final_accuracy = evaluate(&params, &data.test, &cfg.vit)?;

    let record = RunRecord {
        config: cfg.clone(),
        seed: cfg.seed,
        param_count: cfg.vit.param_count(),
        train_examples: data.train.len(),
        total_steps: total,
        warmup_steps: warmup,
        init_accuracy,
        epochs,
        step_losses,
        final_accuracy,
        core_seconds,
        wall_seconds: wall.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &out.dir {
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &params, &cfg.vit, cfg.seed, step)?;
        record.write_json(&dir.join(RECORD_FILE))?;
    }
    Ok(record)
}

/// Cross-entropy of a batch under `params`; handy for overfitting checks.
pub fn batch_loss(params: &ViTParams<f32>, x: &Tensor<f32>, y: &[usize], cfg: &ViTConfig) -> Result<f64> {
    crate::vit::cross_entropy(&vit_forward(params, x, cfg)?, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;
    use crate::data::NUM_CLASSES;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hyper(lr: f64, wd: f64) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 100, 5, 1e-3), 0.0);
        assert_eq!(lr_at(5, 100, 5, 1e-3), 1e-3);
        assert!(lr_at(100, 100, 5, 1e-3).abs() < 1e-18);
        assert!((lr_at(52, 100, 4, 1.0) - 0.5).abs() < 1e-12);
        assert!((lr_at(2, 100, 4, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let mut p = vec![0.3f32, -1.2];
        let before = p.clone();
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, &hyper(1e-2, 0.0), 1, true);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_matches_hand_formula() {
        // From zero moments, m̂ = g and v̂ = g², so the step is lr·g/(|g| + eps).
        let g = 0.25f64;
        let mut p = vec![1.0f64];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adamw_update(&mut p, &[g], &mut m, &mut v, &hyper(0.1, 0.0), 1, true);
        let expected = 1.0 - 0.1 * g / (g.abs() + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn decay_only_shrinks_by_lr_wd_p() {
        let mut p = vec![2.0f64, -4.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, &hyper(0.01, 0.1), 1, true);
        assert!((p[0] - (2.0 - 0.01 * 0.1 * 2.0)).abs() < 1e-15);
        assert!((p[1] - (-4.0 + 0.01 * 0.1 * 4.0)).abs() < 1e-15);
        let mut q = vec![2.0f64];
        adamw_update(&mut q, &[0.0], &mut [0.0], &mut [0.0], &hyper(0.01, 0.1), 1, false);
        assert_eq!(q[0], 2.0);
    }

    #[test]
    fn matches_f64_reference_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 1000;
        let h = hyper(3e-3, 0.1);
        let mut p: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut m = vec![0f32; n];
        let mut v = vec![0f32; n];
        let mut rp: Vec<f64> = p.iter().map(|&x| x as f64).collect();
        let mut rm = vec![0f64; n];
        let mut rv = vec![0f64; n];
        for t in 1..=20 {
            let g: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            adamw_update(&mut p, &g, &mut m, &mut v, &h, t, true);
            for i in 0..n {
                let gi = g[i] as f64;
                rp[i] -= h.lr * h.weight_decay * rp[i];
                rm[i] = 0.9 * rm[i] + 0.1 * gi;
                rv[i] = 0.999 * rv[i] + 0.001 * gi * gi;
                let mhat = rm[i] / (1.0 - 0.9f64.powi(t as i32));
                let vhat = rv[i] / (1.0 - 0.999f64.powi(t as i32));
                rp[i] -= h.lr * mhat / (vhat.sqrt() + h.eps);
            }
        }
        let err = p
            .iter()
            .zip(&rp)
            .map(|(&a, &b)| (a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn decay_skips_gains_and_positions() {
        let cfg = crate::gradcheck::full_matrix()[3].vit_config();
        let mut params = ViTParams::<f32>::init(&cfg, 0).unwrap();
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = AdamState::new(&params);
        adamw_step(&mut params, &grads, &mut state, &hyper(0.1, 0.5), 1).unwrap();
        for ((name, kind, a), (_, _, b)) in params.named().into_iter().zip(before.named()) {
            if !kind.decays() {
                assert_eq!(a, b, "{name}");
            } else if b.max_abs() > 0.0 {
                assert_ne!(a, b, "{name}");
            }
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let cfg = crate::gradcheck::full_matrix()[0].vit_config();
        let mut params = ViTParams::<f32>::init(&cfg, 0).unwrap();
        let mut grads = params.zeros_like();
        grads.blocks[1].mlp_b1.data_mut()[3] = f32::NAN;
        let mut state = AdamState::new(&params);
        let err = adamw_step(&mut params, &grads, &mut state, &hyper(0.1, 0.0), 1).unwrap_err();
        assert!(err.to_string().contains("blocks.1.mlp.b1"), "{err}");
    }

    fn toy_split(n: usize, seed: u64, split: Split) -> Dataset {
        // Class k lights row k of every 4×4 patch, plus noise.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * 64);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % 4;
            for r in 0..8 {
                for _ in 0..8 {
                    let on = r % 4 == y;
                    let base: f32 = if on { 0.9 } else { 0.1 };
                    data.push((base + rng.random_range(-0.1..0.1f32)).clamp(0.0, 1.0));
                }
            }
            labels.push(y);
        }
        Dataset::new(Tensor::new([n, 8, 8, 1], data).unwrap(), labels, "toy", split).unwrap()
    }

    fn toy_config(h: Activation) -> TrainConfig {
        let vit = ViTConfig {
            image_size: 8,
            channels: 1,
            patch_size: 4,
            width: 16,
            depth: 1,
            num_heads: 2,
            mlp_dim: 32,
            num_classes: NUM_CLASSES,
            attention: crate::attention::AttentionConfig::new(h, 1.0, 2, 8).with_qk_layernorm(true),
        };
        let mut cfg = TrainConfig::new(vit, DatasetName::Mnist, 8);
        cfg.batch_size = 16;
        cfg.base_lr = 1e-2;
        cfg.seed = 4;
        cfg
    }

    #[test]
    fn toy_training_is_deterministic_and_learns() {
        let cfg = toy_config(Activation::Relu);
        let train_ds = toy_split(96, 1, Split::Train);
        let data = TrainData::from_splits(&cfg, &train_ds, toy_split(40, 2, Split::Test)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = train(&cfg, &data, &Outputs::to_dir(dir.path())).unwrap();
        let b = train(&cfg, &data, &Outputs::default()).unwrap();
        assert_eq!(a.step_losses, b.step_losses);
        assert_eq!(a.epochs.len(), 8);
        assert_eq!(a.step_losses.len(), 48);
        assert!(a.final_accuracy > 0.9, "{}", a.final_accuracy);
        assert!(a.step_losses.last().unwrap() < &a.step_losses[0]);

        let back = RunRecord::read_json(&dir.path().join(RECORD_FILE)).unwrap();
        assert_eq!(back, a);
        let csv = fs::read_to_string(dir.path().join(STEPS_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 49);
        assert!(csv.starts_with("step,loss,lr"));
        let (header, _) = crate::checkpoint::load_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(header.step, 48);
    }

    #[test]
    fn zero_epochs_records_initial_evaluation_only() {
        let mut cfg = toy_config(Activation::Softmax);
        cfg.epochs = 0;
        let data =
            TrainData::from_splits(&cfg, &toy_split(32, 1, Split::Train), toy_split(16, 2, Split::Test)).unwrap();
        let r = train(&cfg, &data, &Outputs::default()).unwrap();
        assert!(r.epochs.is_empty() && r.step_losses.is_empty());
        assert_eq!(r.final_accuracy, r.init_accuracy);
    }

    #[test]
    fn evaluate_perfect_and_permutation_invariant() {
        // A head whose bias alone picks each example's class.
        let cfg = toy_config(Activation::Relu).vit;
        let mut params = ViTParams::<f32>::init(&cfg, 0).unwrap();
        params.head_w = Tensor::zeros(params.head_w.shape());
        let mut bias = vec![0.0f32; NUM_CLASSES];
        bias[2] = 1.0;
        params.head_b = Tensor::new([NUM_CLASSES], bias).unwrap();
        let ds = toy_split(12, 0, Split::Test);
        let twos: Vec<usize> = (0..12).filter(|i| ds.labels[*i] == 2).collect();
        assert_eq!(evaluate(&params, &ds.select(&twos).unwrap(), &cfg).unwrap(), 1.0);
        assert_eq!(evaluate(&params, &ds, &cfg).unwrap(), 0.25);
        let reversed: Vec<usize> = (0..12).rev().collect();
        assert_eq!(evaluate(&params, &ds.select(&reversed).unwrap(), &cfg).unwrap(), 0.25);
    }

    #[test]
    fn config_json_errors_name_the_field() {
        let err = TrainConfig::from_json("{\n  \"vit\": 3\n}").unwrap_err().to_string();
        assert!(err.contains("vit") && err.contains("line 2"), "{err}");
        let mut cfg = toy_config(Activation::Relu);
        cfg.epochs = 2;
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
        let typo = text.replace("\"batch_size\"", "\"batchsize\"");
        assert!(TrainConfig::from_json(&typo)
            .unwrap_err()
            .to_string()
            .contains("batchsize"));
    }

    #[test]
    fn warmup_must_fit() {
        let mut cfg = toy_config(Activation::Relu);
        cfg.warmup_steps = Some(100);
        let data = TrainData::from_splits(&cfg, &toy_split(32, 1, Split::Train), toy_split(8, 2, Split::Test)).unwrap();
        assert!(matches!(train(&cfg, &data, &Outputs::default()), Err(Error::Config(_))));
    }
}
