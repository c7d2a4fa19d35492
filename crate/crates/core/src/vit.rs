//! A miniature Vision Transformer with exact reverse-mode gradients.
//!
//! patchify → linear embed + learned positions → `depth` pre-norm blocks
//! (attention residual, gelu-MLP residual) → final LayerNorm → global average
//! pooling over tokens → linear head. There is no class token, so the sequence
//! length is exactly the number of patches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::activation::{gelu_derivative_with_cdf, normal_cdf, Activation};
use crate::attention::{
    multihead_attention_backward, multihead_attention_forward, AttentionConfig, AttentionParams, MultiheadCache,
};
use crate::error::{Error, Result};
use crate::norm::{layernorm_rows, layernorm_rows_backward, LAYERNORM_EPS};
use crate::real::Real;
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
    pub attention: AttentionConfig,
}

impl ViTConfig {
    /// Micro/4: 28×28×1 inputs, 4×4 patches (L = 49), width 64, depth 4, 4 heads, MLP 128.
    pub fn micro4_mnist() -> Self {
        Self::micro(28, 1, 4)
    }

    /// Micro/4-32: 32×32×3 inputs, 4×4 patches (L = 64).
    pub fn micro4_cifar() -> Self {
        Self::micro(32, 3, 4)
    }

    fn micro(image_size: usize, channels: usize, patch_size: usize) -> Self {
        ViTConfig {
            image_size,
            channels,
            patch_size,
            width: 64,
            depth: 4,
            num_heads: 4,
            mlp_dim: 128,
            num_classes: 10,
            attention: AttentionConfig::softmax(4, 16).with_qk_layernorm(true),
        }
    }

    /// Replaces φ while keeping heads, qk-layernorm and gate settings.
    pub fn with_phi(mut self, activation: Activation, alpha: f64) -> Self {
        self.attention.activation = activation;
        self.attention.alpha = alpha;
        self
    }

    pub fn with_qk_layernorm(mut self, on: bool) -> Self {
        self.attention.qk_layernorm = on;
        self
    }

    pub fn with_gate(mut self, on: bool) -> Self {
        self.attention.gated = on;
        self
    }

    pub fn seq_len(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if [
            self.image_size,
            self.channels,
            self.patch_size,
            self.width,
            self.depth,
            self.num_heads,
            self.mlp_dim,
            self.num_classes,
        ]
        .contains(&0)
        {
            return bad("all ViT dimensions must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.width.is_multiple_of(self.num_heads) {
            return bad(format!(
                "width {} is not divisible by num_heads {}",
                self.width, self.num_heads
            ));
        }
        if self.attention.num_heads != self.num_heads || self.attention.head_dim * self.num_heads != self.width {
            return bad(format!(
                "attention heads {}×{} disagree with width {} / num_heads {}",
                self.attention.num_heads, self.attention.head_dim, self.width, self.num_heads
            ));
        }
        if self.width < 2 {
            return bad("width must be at least 2 for LayerNorm".into());
        }
        self.attention.validate()
    }

    /// Closed-form parameter count.
    ///
    /// `P²C·D + D + L·D + depth·(4D² + [gate]·D² + [qk-ln]·2d + 2D + 2·D·M + M + D) + D + D·K + K`
    pub fn param_count(&self) -> usize {
        let (d_model, m, k, l) = (self.width, self.mlp_dim, self.num_classes, self.seq_len());
        let a = &self.attention;
        let block = 4 * d_model * d_model
            + if a.gated { d_model * d_model } else { 0 }
            + if a.qk_layernorm { 2 * a.head_dim } else { 0 }
            + 2 * d_model
            + 2 * d_model * m
            + m
            + d_model;
        self.patch_dim() * d_model + d_model + l * d_model + self.depth * block + d_model + d_model * k + k
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Gain,
    PositionEmbedding,
}

impl ParamKind {
    /// Decoupled weight decay applies to everything but gains and position embeddings.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = f32> {
    pub ln1_gain: Tensor<T>,
    pub attn: AttentionParams<T>,
    pub ln2_gain: Tensor<T>,
    pub mlp_w1: Tensor<T>,
    pub mlp_b1: Tensor<T>,
    pub mlp_w2: Tensor<T>,
    pub mlp_b2: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTParams<T = f32> {
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_ln_gain: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

macro_rules! collect_params {
    ($self:ident, $iter:ident, $($amp:tt)+) => {{
        let mut out = Vec::new();
        out.push(("patch.w".to_string(), ParamKind::Weight, $($amp)+ $self.patch_w));
        out.push(("patch.b".to_string(), ParamKind::Bias, $($amp)+ $self.patch_b));
        out.push(("pos_embed".to_string(), ParamKind::PositionEmbedding, $($amp)+ $self.pos_embed));
        for (i, b) in $self.blocks.$iter().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.push((p("ln1.gain"), ParamKind::Gain, $($amp)+ b.ln1_gain));
            out.push((p("attn.wq"), ParamKind::Weight, $($amp)+ b.attn.wq));
            out.push((p("attn.wk"), ParamKind::Weight, $($amp)+ b.attn.wk));
            out.push((p("attn.wv"), ParamKind::Weight, $($amp)+ b.attn.wv));
            out.push((p("attn.wo"), ParamKind::Weight, $($amp)+ b.attn.wo));
            if let Some(wg) = $($amp)+ b.attn.wg {
                out.push((p("attn.wg"), ParamKind::Weight, wg));
            }
            if let Some(g) = $($amp)+ b.attn.q_gain {
                out.push((p("attn.q_gain"), ParamKind::Gain, g));
            }
            if let Some(g) = $($amp)+ b.attn.k_gain {
                out.push((p("attn.k_gain"), ParamKind::Gain, g));
            }
            out.push((p("ln2.gain"), ParamKind::Gain, $($amp)+ b.ln2_gain));
            out.push((p("mlp.w1"), ParamKind::Weight, $($amp)+ b.mlp_w1));
            out.push((p("mlp.b1"), ParamKind::Bias, $($amp)+ b.mlp_b1));
            out.push((p("mlp.w2"), ParamKind::Weight, $($amp)+ b.mlp_w2));
            out.push((p("mlp.b2"), ParamKind::Bias, $($amp)+ b.mlp_b2));
        }
        out.push(("final_ln.gain".to_string(), ParamKind::Gain, $($amp)+ $self.final_ln_gain));
        out.push(("head.w".to_string(), ParamKind::Weight, $($amp)+ $self.head_w));
        out.push(("head.b".to_string(), ParamKind::Bias, $($amp)+ $self.head_b));
        out
    }};
}

impl<T: Real> ViTParams<T> {
    /// Truncated-normal(0, 0.02) weights, zero biases, unit gains, normal(0, 0.02) positions.
    pub fn init(cfg: &ViTConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(cfg, seed, INIT_STD)
    }

    /// Same layout as [`ViTParams::init`] with a custom weight scale.
    pub fn init_with_std(cfg: &ViTConfig, seed: u64, std: f64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dm, m, k, l, pd) = (cfg.width, cfg.mlp_dim, cfg.num_classes, cfg.seq_len(), cfg.patch_dim());
        let a = &cfg.attention;
        let mut weight = |rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| T::of(truncated_normal(&mut rng) * std))
                .collect();
            Tensor::from_parts(vec![rows, cols], data)
        };
        let patch_w = weight(pd, dm);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            let attn = AttentionParams {
                wq: weight(dm, dm),
                wk: weight(dm, dm),
                wv: weight(dm, dm),
                wo: weight(dm, dm),
                wg: a.gated.then(|| weight(dm, dm)),
                q_gain: a.qk_layernorm.then(|| Tensor::full([a.head_dim], T::one())),
                k_gain: a.qk_layernorm.then(|| Tensor::full([a.head_dim], T::one())),
            };
            blocks.push(BlockParams {
                ln1_gain: Tensor::full([dm], T::one()),
                attn,
                ln2_gain: Tensor::full([dm], T::one()),
                mlp_w1: weight(dm, m),
                mlp_b1: Tensor::zeros([m]),
                mlp_w2: weight(m, dm),
                mlp_b2: Tensor::zeros([dm]),
            });
        }
        let head_w = weight(dm, k);
        let pos = (0..l * dm)
            .map(|_| T::of(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        Ok(ViTParams {
            patch_w,
            patch_b: Tensor::zeros([dm]),
            pos_embed: Tensor::from_parts(vec![l, dm], pos),
            blocks,
            final_ln_gain: Tensor::full([dm], T::one()),
            head_w,
            head_b: Tensor::zeros([k]),
        })
    }

    /// Named parameters in a fixed order.
    pub fn named(&self) -> Vec<(String, ParamKind, &Tensor<T>)> {
        collect_params!(self, iter, &)
    }

    /// Mutable named parameters in the same order as [`ViTParams::named`].
    pub fn named_mut(&mut self) -> Vec<(String, ParamKind, &mut Tensor<T>)> {
        collect_params!(self, iter_mut, &mut)
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, _, t) in z.named_mut() {
            t.data_mut().fill(T::zero());
        }
        z
    }

    pub fn cast<U: Real>(&self) -> ViTParams<U> {
        let c = |t: &Tensor<T>| t.cast::<U>();
        ViTParams {
            patch_w: c(&self.patch_w),
            patch_b: c(&self.patch_b),
            pos_embed: c(&self.pos_embed),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1_gain: c(&b.ln1_gain),
                    attn: AttentionParams {
                        wq: c(&b.attn.wq),
                        wk: c(&b.attn.wk),
                        wv: c(&b.attn.wv),
                        wo: c(&b.attn.wo),
                        wg: b.attn.wg.as_ref().map(c),
                        q_gain: b.attn.q_gain.as_ref().map(c),
                        k_gain: b.attn.k_gain.as_ref().map(c),
                    },
                    ln2_gain: c(&b.ln2_gain),
                    mlp_w1: c(&b.mlp_w1),
                    mlp_b1: c(&b.mlp_b1),
                    mlp_w2: c(&b.mlp_w2),
                    mlp_b2: c(&b.mlp_b2),
                })
                .collect(),
            final_ln_gain: c(&self.final_ln_gain),
            head_w: c(&self.head_w),
            head_b: c(&self.head_b),
        }
    }

    /// Checks every tensor's shape against the config.
    pub fn check(&self, cfg: &ViTConfig) -> Result<()> {
        cfg.validate()?;
        let reference = ViTParams::<T>::init(cfg, 0)?;
        let ours = self.named();
        let theirs = reference.named();
        if ours.len() != theirs.len() {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, config expects {}",
                ours.len(),
                theirs.len()
            )));
        }
        for ((name, _, t), (rname, _, r)) in ours.iter().zip(&theirs) {
            if name != rname || t.shape() != r.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} {:?} does not match expected {rname} {:?}",
                    t.shape(),
                    r.shape()
                )));
            }
        }
        Ok(())
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// Splits an `[H×W×C]` image into non-overlapping `P×P` patches, one row per patch.
///
/// Patches are ordered row-major over the patch grid; within a patch, pixels are
/// row-major with channels innermost.
pub fn patchify<T: Real>(image: &Tensor<T>, patch_size: usize) -> Result<Tensor<T>> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::InvalidShape {
            shape: image.shape().to_vec(),
            reason: "patchify expects an [H×W×C] image".into(),
        });
    };
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Config(format!(
            "image {h}×{w} is not divisible into {patch_size}×{patch_size} patches"
        )));
    }
    let l = (h / patch_size) * (w / patch_size);
    let mut out = vec![T::zero(); l * patch_size * patch_size * c];
    patchify_into(image.data(), h, w, c, patch_size, &mut out);
    Ok(Tensor::from_parts(vec![l, patch_size * patch_size * c], out))
}

fn patchify_into<T: Copy>(img: &[T], h: usize, w: usize, c: usize, p: usize, out: &mut [T]) {
    let (gh, gw) = (h / p, w / p);
    let row = p * c;
    let mut o = 0;
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..p {
                let y = py * p + dy;
                let start = (y * w + px * p) * c;
                out[o..o + row].copy_from_slice(&img[start..start + row]);
                o += row;
            }
        }
    }
}

fn check_batch<T: Real>(batch: &Tensor<T>, cfg: &ViTConfig) -> Result<usize> {
    match *batch.shape() {
        [b, h, w, c] if h == cfg.image_size && w == cfg.image_size && c == cfg.channels => Ok(b),
        _ => Err(Error::Shape {
            op: "vit_forward",
            lhs: batch.shape().to_vec(),
            rhs: vec![0, cfg.image_size, cfg.image_size, cfg.channels],
        }),
    }
}

struct LnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

fn ln_forward<T: Real>(x: &[T], gain: &Tensor<T>, d: usize) -> (Vec<T>, LnCache<T>) {
    let rows = x.len() / d;
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    let ones = vec![T::one(); d];
    layernorm_rows(x, &ones, LAYERNORM_EPS, d, &mut xhat, &mut inv_std);
    let out = xhat
        .chunks_exact(d)
        .flat_map(|r| r.iter().zip(gain.data()).map(|(&v, &g)| v * g))
        .collect();
    (out, LnCache { xhat, inv_std })
}

fn ln_backward<T: Real>(cache: &LnCache<T>, gain: &Tensor<T>, dy: &[T], d: usize, dgain: &mut Tensor<T>) -> Vec<T> {
    let mut dx = vec![T::zero(); dy.len()];
    layernorm_rows_backward(
        &cache.xhat,
        &cache.inv_std,
        gain.data(),
        dy,
        d,
        &mut dx,
        dgain.data_mut(),
    );
    dx
}

fn add_bias<T: Real>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Column sums accumulated in `f64`, added into `out`.
fn column_sums_into<T: Real>(x: &[T], cols: usize, out: &mut Tensor<T>) {
    let mut acc = vec![0.0f64; cols];
    for row in x.chunks_exact(cols) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v.f64();
        }
    }
    for (o, a) in out.data_mut().iter_mut().zip(acc) {
        *o += T::of(a);
    }
}

struct BlockCache<T> {
    ln1: LnCache<T>,
    attn: MultiheadCache<T>,
    ln2: LnCache<T>,
    mlp_in: Vec<T>,
    pre_gelu: Vec<T>,
    gelu_cdf: Vec<T>,
    post_gelu: Vec<T>,
}

struct ForwardCache<T> {
    batch: usize,
    patches: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    final_ln: LnCache<T>,
    pooled: Vec<T>,
}

fn forward<T: Real>(
    params: &ViTParams<T>,
    batch: &Tensor<T>,
    cfg: &ViTConfig,
    keep_cache: bool,
) -> Result<(Tensor<T>, Option<ForwardCache<T>>)> {
    cfg.validate()?;
    let b = check_batch(batch, cfg)?;
    let (dm, l, pd, m, k) = (cfg.width, cfg.seq_len(), cfg.patch_dim(), cfg.mlp_dim, cfg.num_classes);
    let n = b * l;
    let image_len = cfg.image_size * cfg.image_size * cfg.channels;

    let mut patches = vec![T::zero(); n * pd];
    for (img, out) in batch
        .data()
        .chunks_exact(image_len)
        .zip(patches.chunks_exact_mut(l * pd))
    {
        patchify_into(img, cfg.image_size, cfg.image_size, cfg.channels, cfg.patch_size, out);
    }
    let mut x = vec![T::zero(); n * dm];
    gemm(&patches, params.patch_w.data(), &mut x, n, pd, dm);
    add_bias(&mut x, params.patch_b.data());
    for seq in x.chunks_exact_mut(l * dm) {
        for (v, &p) in seq.iter_mut().zip(params.pos_embed.data()) {
            *v += p;
        }
    }

    let mut block_caches = Vec::with_capacity(if keep_cache { cfg.depth } else { 0 });
    for bp in &params.blocks {
        let (a_in, ln1) = ln_forward(&x, &bp.ln1_gain, dm);
        let a_in = Tensor::from_parts(vec![n, dm], a_in);
        let (a_out, attn) = multihead_attention_forward(&a_in, l, &bp.attn, &cfg.attention)?;
        for (v, &a) in x.iter_mut().zip(a_out.data()) {
            *v += a;
        }
        let (mlp_in, ln2) = ln_forward(&x, &bp.ln2_gain, dm);
        let mut pre_gelu = vec![T::zero(); n * m];
        gemm(&mlp_in, bp.mlp_w1.data(), &mut pre_gelu, n, dm, m);
        add_bias(&mut pre_gelu, bp.mlp_b1.data());
        let gelu_cdf: Vec<T> = pre_gelu.iter().map(|&v| normal_cdf(v)).collect();
        let post_gelu: Vec<T> = pre_gelu.iter().zip(&gelu_cdf).map(|(&v, &p)| v * p).collect();
        let mut mlp_out = vec![T::zero(); n * dm];
        gemm(&post_gelu, bp.mlp_w2.data(), &mut mlp_out, n, m, dm);
        add_bias(&mut mlp_out, bp.mlp_b2.data());
        for (v, &o) in x.iter_mut().zip(&mlp_out) {
            *v += o;
        }
        if keep_cache {
            block_caches.push(BlockCache {
                ln1,
                attn,
                ln2,
                mlp_in,
                pre_gelu,
                gelu_cdf,
                post_gelu,
            });
        }
    }

    let (fin, final_ln) = ln_forward(&x, &params.final_ln_gain, dm);
    let mut pooled = vec![T::zero(); b * dm];
    for (seq, prow) in fin.chunks_exact(l * dm).zip(pooled.chunks_exact_mut(dm)) {
        let mut acc = vec![0.0f64; dm];
        for tok in seq.chunks_exact(dm) {
            for (a, &v) in acc.iter_mut().zip(tok) {
                *a += v.f64();
            }
        }
        for (p, a) in prow.iter_mut().zip(acc) {
            *p = T::of(a / l as f64);
        }
    }
    let mut logits = vec![T::zero(); b * k];
    gemm(&pooled, params.head_w.data(), &mut logits, b, dm, k);
    add_bias(&mut logits, params.head_b.data());
    let logits = Tensor::from_parts(vec![b, k], logits);
    logits.ensure_finite("vit_forward")?;

    let cache = keep_cache.then_some(ForwardCache {
        batch: b,
        patches,
        blocks: block_caches,
        final_ln,
        pooled,
    });
    Ok((logits, cache))
}

/// Class logits `[B×num_classes]` for a batch `[B×H×W×C]`.
pub fn vit_forward<T: Real>(params: &ViTParams<T>, batch: &Tensor<T>, cfg: &ViTConfig) -> Result<Tensor<T>> {
    params.check(cfg)?;
    forward(params, batch, cfg, false).map(|(logits, _)| logits)
}

/// Smallest distance from any attention logit to a kink of the attention activation.
pub fn attention_kink_margin<T: Real>(params: &ViTParams<T>, batch: &Tensor<T>, cfg: &ViTConfig) -> Result<f64> {
    params.check(cfg)?;
    let (_, cache) = forward(params, batch, cfg, true)?;
    Ok(cache
        .expect("cache requested")
        .blocks
        .iter()
        .map(|b| b.attn.kink_margin(cfg.attention.activation))
        .fold(f64::INFINITY, f64::min))
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::CountMismatch {
            images: rows,
            labels: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: classes,
        });
    }
    Ok(())
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    cross_entropy_with_grad(logits, labels).map(|(loss, _)| loss)
}

/// Cross-entropy and its gradient w.r.t. the logits, `(softmax - onehot) / B`.
pub fn cross_entropy_with_grad<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (b, k) = logits.dims2("cross_entropy")?;
    check_labels(labels, b, k)?;
    let mut grad = vec![T::zero(); b * k];
    let mut total = 0.0f64;
    for ((row, grow), &y) in logits.data().chunks_exact(k).zip(grad.chunks_exact_mut(k)).zip(labels) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
        let denom: f64 = row.iter().map(|v| (v.f64() - max).exp()).sum();
        let log_z = max + denom.ln();
        total += log_z - row[y].f64();
        for (j, (g, &v)) in grow.iter_mut().zip(row).enumerate() {
            let p = (v.f64() - log_z).exp();
            let onehot = if j == y { 1.0 } else { 0.0 };
            *g = T::of((p - onehot) / b as f64);
        }
    }
    Ok((total / b as f64, Tensor::from_parts(vec![b, k], grad)))
}

/// Loss and exact gradient of `cross_entropy ∘ vit_forward` w.r.t. every parameter.
pub fn loss_and_grad<T: Real>(
    params: &ViTParams<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    cfg: &ViTConfig,
) -> Result<(f64, ViTParams<T>)> {
    params.check(cfg)?;
    let (logits, cache) = forward(params, batch, cfg, true)?;
    let cache = cache.expect("cache requested");
    let (loss, dlogits) = cross_entropy_with_grad(&logits, labels)?;
    let grads = backward(params, cfg, &cache, dlogits.data())?;
    Ok((loss, grads))
}

fn backward<T: Real>(
    params: &ViTParams<T>,
    cfg: &ViTConfig,
    cache: &ForwardCache<T>,
    dlogits: &[T],
) -> Result<ViTParams<T>> {
    let (dm, l, pd, m, k) = (cfg.width, cfg.seq_len(), cfg.patch_dim(), cfg.mlp_dim, cfg.num_classes);
    let b = cache.batch;
    let n = b * l;
    let mut g = params.zeros_like();

    gemm_tn(&cache.pooled, dlogits, g.head_w.data_mut(), b, dm, k);
    column_sums_into(dlogits, k, &mut g.head_b);
    let mut dpooled = vec![T::zero(); b * dm];
    gemm_nt(dlogits, params.head_w.data(), &mut dpooled, b, k, dm);

    let inv_l = T::of(1.0 / l as f64);
    let mut dfin = vec![T::zero(); n * dm];
    for (seq, prow) in dfin.chunks_exact_mut(l * dm).zip(dpooled.chunks_exact(dm)) {
        for tok in seq.chunks_exact_mut(dm) {
            for (t, &p) in tok.iter_mut().zip(prow) {
                *t = p * inv_l;
            }
        }
    }
    let mut dx = ln_backward(&cache.final_ln, &params.final_ln_gain, &dfin, dm, &mut g.final_ln_gain);

    for ((bp, bc), bg) in params.blocks.iter().zip(&cache.blocks).zip(g.blocks.iter_mut()).rev() {
        // MLP residual
        column_sums_into(&dx, dm, &mut bg.mlp_b2);
        gemm_tn(&bc.post_gelu, &dx, bg.mlp_w2.data_mut(), n, m, dm);
        let mut dh = vec![T::zero(); n * m];
        gemm_nt(&dx, bp.mlp_w2.data(), &mut dh, n, dm, m);
        for ((d, &z), &p) in dh.iter_mut().zip(&bc.pre_gelu).zip(&bc.gelu_cdf) {
            *d *= gelu_derivative_with_cdf(z, p);
        }
        column_sums_into(&dh, m, &mut bg.mlp_b1);
        gemm_tn(&bc.mlp_in, &dh, bg.mlp_w1.data_mut(), n, dm, m);
        let mut dmlp_in = vec![T::zero(); n * dm];
        gemm_nt(&dh, bp.mlp_w1.data(), &mut dmlp_in, n, m, dm);
        let dres = ln_backward(&bc.ln2, &bp.ln2_gain, &dmlp_in, dm, &mut bg.ln2_gain);
        for (d, r) in dx.iter_mut().zip(dres) {
            *d += r;
        }

        // attention residual
        let dout = Tensor::from_parts(vec![n, dm], dx.clone());
        let (da_in, ag) = multihead_attention_backward(&bc.attn, &bp.attn, &cfg.attention, &dout)?;
        bg.attn = ag;
        let dres = ln_backward(&bc.ln1, &bp.ln1_gain, da_in.data(), dm, &mut bg.ln1_gain);
        for (d, r) in dx.iter_mut().zip(dres) {
            *d += r;
        }
    }

    for seq in dx.chunks_exact(l * dm) {
        for (p, &d) in g.pos_embed.data_mut().iter_mut().zip(seq) {
            *p += d;
        }
    }
    gemm_tn(&cache.patches, &dx, g.patch_w.data_mut(), n, pd, dm);
    column_sums_into(&dx, dm, &mut g.patch_b);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::multihead_attention;
    use crate::tensor::max_relative_error;

    fn tiny(activation: Activation, ln: bool, gate: bool) -> ViTConfig {
        ViTConfig {
            image_size: 8,
            channels: 2,
            patch_size: 4,
            width: 8,
            depth: 2,
            num_heads: 2,
            mlp_dim: 12,
            num_classes: 3,
            attention: AttentionConfig::new(activation, 1.0, 2, 4)
                .with_qk_layernorm(ln)
                .with_gate(gate),
        }
    }

    fn images(b: usize, cfg: &ViTConfig, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * cfg.image_size * cfg.image_size * cfg.channels;
        Tensor::new(
            [b, cfg.image_size, cfg.image_size, cfg.channels],
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn patchify_layout() {
        let img = Tensor::<f32>::new([4, 4, 1], (0..16).map(|v| v as f32).collect()).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        let whole = patchify(&img, 4).unwrap();
        assert_eq!(whole.data(), img.data());
        let flat = patchify(&Tensor::<f32>::full([4, 4, 3], 0.5), 2).unwrap();
        assert!(flat
            .data()
            .chunks(12)
            .all(|row| row == flat.data()[..12].to_vec().as_slice()));
        assert!(patchify(&img, 3).is_err());
    }

    #[test]
    fn patchify_channels_innermost() {
        let img = Tensor::<f32>::new([2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        assert_eq!(patchify(&img, 2).unwrap().data(), img.data());
    }

    #[test]
    fn micro4_param_count() {
        let cfg = ViTConfig::micro4_mnist();
        assert_eq!(cfg.seq_len(), 49);
        // Independent enumeration of tensor shapes (qk-layernorm on, no gate).
        assert_eq!(cfg.param_count(), 137_418);
        assert_eq!(ViTParams::<f32>::init(&cfg, 0).unwrap().num_params(), 137_418);
        assert_eq!(cfg.clone().with_qk_layernorm(false).param_count(), 137_290);
        assert_eq!(cfg.clone().with_gate(true).param_count(), 153_802);
        assert_eq!(ViTConfig::micro4_cifar().param_count(), 140_426);
        for ln in [false, true] {
            for gate in [false, true] {
                let c = tiny(Activation::Relu, ln, gate);
                assert_eq!(ViTParams::<f32>::init(&c, 1).unwrap().num_params(), c.param_count());
            }
        }
    }

    #[test]
    fn init_is_deterministic_with_unit_gains() {
        let cfg = ViTConfig::micro4_mnist();
        let a = ViTParams::<f32>::init(&cfg, 7).unwrap();
        assert_eq!(a, ViTParams::init(&cfg, 7).unwrap());
        assert_ne!(a, ViTParams::init(&cfg, 8).unwrap());
        for (name, kind, t) in a.named() {
            if kind == ParamKind::Gain {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
            if kind == ParamKind::Weight {
                assert!(t.max_abs() <= 2.0 * INIT_STD + 1e-7, "{name}");
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = ViTConfig::micro4_mnist();
        cfg.patch_size = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ViTConfig::micro4_mnist();
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ViTConfig::micro4_mnist();
        cfg.attention.alpha = 1.5;
        cfg.attention.activation = Activation::Relu;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_image_gives_finite_logits() {
        let cfg = ViTConfig::micro4_mnist();
        let params = ViTParams::<f32>::init(&cfg, 0).unwrap();
        let logits = vit_forward(&params, &Tensor::zeros([1, 28, 28, 1]), &cfg).unwrap();
        assert_eq!(logits.shape(), &[1, 10]);
        assert!(logits.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn batch_permutation_permutes_logits() {
        let cfg = tiny(Activation::Relu, true, false);
        let params = ViTParams::<f64>::init_with_std(&cfg, 3, 0.3).unwrap();
        let x = images(3, &cfg, 1);
        let per = 8 * 8 * 2;
        let mut swapped = x.data()[2 * per..].to_vec();
        swapped.extend_from_slice(&x.data()[per..2 * per]);
        swapped.extend_from_slice(&x.data()[..per]);
        let swapped = Tensor::new(x.shape(), swapped).unwrap();
        let a = vit_forward(&params, &x, &cfg).unwrap();
        let b = vit_forward(&params, &swapped, &cfg).unwrap();
        assert_eq!(&a.data()[..3], &b.data()[6..]);
        assert_eq!(&a.data()[3..6], &b.data()[3..6]);
        assert_eq!(&a.data()[6..], &b.data()[..3]);
        assert_eq!(a, vit_forward(&params, &x, &cfg).unwrap());
    }

    #[test]
    fn single_token_softmax_attention_is_value_path() {
        let mut cfg = tiny(Activation::Softmax, false, false);
        cfg.patch_size = 8;
        assert_eq!(cfg.seq_len(), 1);
        let params = ViTParams::<f64>::init_with_std(&cfg, 5, 0.3).unwrap();
        let x = Tensor::<f64>::new([1, 8], (0..8).map(|v| v as f64 * 0.1 - 0.3).collect()).unwrap();
        let attn = &params.blocks[0].attn;
        let out = multihead_attention(&x, attn, &cfg.attention).unwrap();
        let v_path = crate::tensor::matmul(&crate::tensor::matmul(&x, &attn.wv).unwrap(), &attn.wo).unwrap();
        assert!(max_relative_error(&out, &v_path) < 1e-12);
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = Tensor::<f64>::zeros([1, 10]);
        assert!((cross_entropy(&uniform, &[3]).unwrap() - 10f64.ln()).abs() < 1e-12);
        let hand = Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert!((cross_entropy(&hand, &[0, 1]).unwrap() - 0.313_261_687_518_222_8).abs() < 1e-12);
        let confident = Tensor::<f32>::from_rows(&[&[80.0, -80.0]]).unwrap();
        assert!(cross_entropy(&confident, &[0]).unwrap() < 1e-30);
        assert!(matches!(
            cross_entropy(&hand, &[0, 2]),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn dead_head_blocks_all_upstream_gradients() {
        let cfg = tiny(Activation::Relu, true, true);
        let mut params = ViTParams::<f64>::init_with_std(&cfg, 9, 0.3).unwrap();
        params.head_w = Tensor::zeros(params.head_w.shape());
        let (_, g) = loss_and_grad(&params, &images(2, &cfg, 4), &[0, 2], &cfg).unwrap();
        assert!(g.pos_embed.data().iter().all(|&v| v == 0.0));
        assert!(g.patch_w.data().iter().all(|&v| v == 0.0));
        assert!(g.head_b.max_abs() > 0.0);
    }

    #[test]
    fn duplicated_batch_leaves_loss_and_gradients_unchanged() {
        let cfg = tiny(Activation::Softmax, true, false);
        let params = ViTParams::<f64>::init_with_std(&cfg, 2, 0.3).unwrap();
        let x = images(2, &cfg, 6);
        let mut doubled = x.data().to_vec();
        doubled.extend_from_slice(x.data());
        let doubled = Tensor::new([4, 8, 8, 2], doubled).unwrap();
        let (l1, g1) = loss_and_grad(&params, &x, &[1, 2], &cfg).unwrap();
        let (l2, g2) = loss_and_grad(&params, &doubled, &[1, 2, 1, 2], &cfg).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for ((name, _, a), (_, _, b)) in g1.named().into_iter().zip(g2.named()) {
            assert!(max_relative_error(a, b) < 1e-10, "{name}");
        }
    }

    #[test]
    fn named_mut_matches_named() {
        let cfg = tiny(Activation::Relu, true, true);
        let mut params = ViTParams::<f32>::init(&cfg, 0).unwrap();
        let names: Vec<String> = params.named().into_iter().map(|(n, _, _)| n).collect();
        let names_mut: Vec<String> = params.named_mut().into_iter().map(|(n, _, _)| n).collect();
        assert_eq!(names, names_mut);
        assert!(names.contains(&"blocks.1.attn.wg".to_string()));
        assert!(names.contains(&"blocks.0.attn.q_gain".to_string()));
    }

    #[test]
    fn shape_mismatches_are_reported() {
        let cfg = tiny(Activation::Relu, false, false);
        let params = ViTParams::<f32>::init(&cfg, 0).unwrap();
        assert!(vit_forward(&params, &Tensor::zeros([1, 8, 8, 1]), &cfg).is_err());
        let gated = tiny(Activation::Relu, false, true);
        assert!(vit_forward(&params, &Tensor::zeros([1, 8, 8, 2]), &gated).is_err());
    }
}
