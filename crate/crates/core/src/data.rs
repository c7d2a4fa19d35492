//! MNIST (IDX) and CIFAR-10 (binary) loaders, stratified subsets, seeded batching.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATA_DIR_ENV: &str = "RELUATTN_DATA_DIR";
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 32 * 32 * 3;
pub const NUM_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Mnist,
    Cifar10,
}

impl DatasetName {
    /// Number of examples in the published split.
    pub fn split_len(self, split: Split) -> usize {
        match (self, split) {
            (DatasetName::Mnist, Split::Train) => 60_000,
            (DatasetName::Cifar10, Split::Train) => 50_000,
            (_, Split::Test) => 10_000,
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Cifar10 => "cifar10",
        })
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetName::Mnist),
            "cifar10" | "cifar-10" => Ok(DatasetName::Cifar10),
            _ => Err(Error::Usage(format!(
                "unknown dataset {s:?} (expected mnist or cifar10)"
            ))),
        }
    }
}

/// Images `[N×H×W×C]` with pixels in `[0, 1]`, and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub name: String,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, name: impl Into<String>, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::InvalidShape {
                shape: images.shape().to_vec(),
                reason: "dataset images must be [N×H×W×C]".into(),
            });
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= NUM_CLASSES) {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: NUM_CLASSES,
            });
        }
        Ok(Dataset {
            images,
            labels,
            name: name.into(),
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[H, W, C]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// The examples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Usage(format!(
                    "index {i} out of range for {} examples",
                    self.len()
                )));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let [h, w, c] = self.image_shape();
        Dataset::new(
            Tensor::new([indices.len(), h, w, c], data)?,
            labels,
            self.name.clone(),
            self.split,
        )
    }
}

/// `--data-dir` if given, else `$RELUATTN_DATA_DIR`.
pub fn resolve_data_dir(flag: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(Error::NoDataDir),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile {
            path: path.to_path_buf(),
        },
        _ => Error::io(path, e),
    })
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn idx_header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let header = 4 + 4 * dims;
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header as u64,
            found: bytes.len() as u64,
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header as u64,
            found: bytes.len() as u64,
        });
    }
    let shape: Vec<usize> = (0..dims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let expected = header + shape.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: expected as u64,
            found: bytes.len() as u64,
        });
    }
    Ok(shape)
}

/// Reads an IDX image file (`0x00000803`, `N×H×W` bytes) and label file (`0x00000801`).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    load_idx_split(images_path, labels_path, Split::Train)
}

fn load_idx_split(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let img = read(images_path)?;
    let lab = read(labels_path)?;
    let shape = idx_header(images_path, &img, IDX_IMAGES_MAGIC, 3)?;
    let lshape = idx_header(labels_path, &lab, IDX_LABELS_MAGIC, 1)?;
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    if n != lshape[0] {
        return Err(Error::CountMismatch {
            images: n,
            labels: lshape[0],
        });
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Format(format!(
            "{}: empty IDX image file",
            images_path.display()
        )));
    }
    let pixels = img[16..16 + n * h * w].iter().map(|&b| b as f32 / 255.0).collect();
    let labels = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    Dataset::new(Tensor::new([n, h, w, 1], pixels)?, labels, "mnist", split)
}

fn mnist_root(dir: &Path) -> PathBuf {
    let nested = dir.join("mnist");
    if !dir.join("train-images-idx3-ubyte").exists() && nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// MNIST from `dir` (or `dir/mnist`) using the official file names.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let root = mnist_root(dir);
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    load_idx_split(
        &root.join(format!("{prefix}-images-idx3-ubyte")),
        &root.join(format!("{prefix}-labels-idx1-ubyte")),
        split,
    )
}

fn cifar_root(dir: &Path) -> PathBuf {
    for nested in ["cifar-10-batches-bin", "cifar10", "cifar-10"] {
        let p = dir.join(nested);
        if !dir.join("test_batch.bin").exists() && p.is_dir() {
            return p;
        }
    }
    dir.to_path_buf()
}

/// CIFAR-10 binary batches: records of one label byte then 1024 R, 1024 G, 1024 B bytes.
/// Pixels are stored `[H×W×C]` with channels in R, G, B order.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let root = cifar_root(dir);
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let plane = 32 * 32;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let path = root.join(name);
        let bytes = read(&path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Misaligned {
                path,
                len: bytes.len() as u64,
                record: CIFAR_RECORD as u64,
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            labels.push(rec[0] as usize);
            let body = &rec[1..];
            for p in 0..plane {
                for c in 0..3 {
                    pixels.push(body[c * plane + p] as f32 / 255.0);
                }
            }
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::new([n, 32, 32, 3], pixels)?, labels, "cifar10", split)
}

pub fn load(name: DatasetName, dir: &Path, split: Split) -> Result<Dataset> {
    match name {
        DatasetName::Mnist => load_mnist(dir, split),
        DatasetName::Cifar10 => load_cifar10(dir, split),
    }
}

/// Sorted indices of a class-stratified sample of size `n`.
///
/// Each class is shuffled with the seed, then classes are visited round-robin in
/// label order, so class counts differ by at most one while every class has examples left.
pub fn subset_indices(labels: &[usize], n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > labels.len() {
        return Err(Error::Usage(format!(
            "subset of {n} requested from {} examples",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }
    let mut picked = Vec::with_capacity(n);
    let mut depth = 0;
    while picked.len() < n {
        for members in &by_class {
            if picked.len() == n {
                break;
            }
            if let Some(&i) = members.get(depth) {
                picked.push(i);
            }
        }
        depth += 1;
    }
    picked.sort_unstable();
    Ok(picked)
}

pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    ds.select(&subset_indices(&ds.labels, n, seed)?)
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_permutation(n: usize, epoch_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    order
}

/// Maps `[0, 1]` pixels to `[-1, 1]` with mean 0.5 and std 0.5.
pub fn normalize(x: f32) -> f32 {
    (x - 0.5) / 0.5
}

/// Shuffled mini-batches of normalized images; the last batch may be short.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batches(ds: &Dataset, batch_size: usize, epoch_seed: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::Usage("batch_size must be at least 1".into()));
    }
    Ok(Batches {
        ds,
        order: epoch_permutation(ds.len(), epoch_seed),
        batch_size,
        pos: 0,
    })
}

/// Normalized images and labels at `indices`, in order, without shuffling.
pub fn gather_batch(ds: &Dataset, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
    let n = ds.image_len();
    let mut data = Vec::with_capacity(indices.len() * n);
    for &i in indices {
        data.extend(ds.image(i).iter().map(|&v| normalize(v)));
    }
    let [h, w, c] = ds.image_shape();
    let labels = indices.iter().map(|&i| ds.labels[i]).collect();
    (Tensor::from_parts(vec![indices.len(), h, w, c], data), labels)
}

impl<'a> Batches<'a> {
    /// Number of batches in the epoch.
    pub fn count(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = (Tensor<f32>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = gather_batch(self.ds, &self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}
