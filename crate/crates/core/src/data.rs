//! Dataset ingestion: MNIST (IDX, big-endian) and CIFAR-10 binary batches,
//! plus seeded minibatch streams.
//!
//! Pixels are stored scaled to `[0, 1]`. Per-channel normalization is kept
//! alongside the data and applied only at model input.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "SPARSECERT_DATA_DIR";

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// SHA-256 of the uncompressed MNIST IDX files, in [`MNIST_FILES`] order.
pub const MNIST_SHA256: [&str; 4] = [
    "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
];

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn mnist() -> Self {
        Self {
            mean: vec![0.1307],
            std: vec![0.3081],
        }
    }

    pub fn cifar10() -> Self {
        Self {
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.2471, 0.2435, 0.2616],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Applies the transform to a batch `[N, C, ...]` (or `[N, D]` when there
    /// is a single channel).
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let c = self.channels();
        let (ch_axis_len, inner) = match s.len() {
            0 | 1 => return Err(Error::shape("normalize", format!("{s:?}"))),
            2 => (1, s[1]),
            _ => (s[1], s[2..].iter().product()),
        };
        if ch_axis_len != c || self.std.iter().any(|&v| v <= 0.0) {
            return Err(Error::shape(
                "normalize",
                format!("{c}-channel normalization for input {s:?}"),
            ));
        }
        let mut out = x.clone();
        for (k, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let ch = k % c;
            let (m, sd) = (T::lit(self.mean[ch]), T::lit(self.std[ch]));
            chunk.iter_mut().for_each(|v| *v = (*v - m) / sd);
        }
        Ok(out)
    }

    /// Scales per-channel radii: `r / std`.
    pub fn scale_radius<T: Scalar>(&self, r: &Tensor<T>) -> Result<Tensor<T>> {
        let zero_mean = Normalization {
            mean: vec![0.0; self.channels()],
            std: self.std.clone(),
        };
        zero_mean.apply(r)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[N, C, H, W]`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
        normalization: Normalization,
    ) -> Result<Self> {
        if images.rank() < 2 || images.shape()[0] != labels.len() {
            return Err(Error::Contract(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if labels.iter().any(|&y| y >= classes) {
            return Err(Error::Contract("label out of range".into()));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images.slice_outer(0, n),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split,
            normalization: self.normalization.clone(),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather_outer(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
            normalization: self.normalization.clone(),
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::data(path, "truncated header"))
}

/// Parses an IDX3 image file into `[N, 1, rows, cols]` scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::data(
            path,
            format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() != need {
        return Err(Error::data(
            path,
            format!("truncated or oversized: header says {need} pixel bytes, found {}", body.len()),
        ));
    }
    let data = body.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::data(
            path,
            format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::data(
            path,
            format!("header says {n} labels, found {}", body.len()),
        ));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

fn load_idx_pair(dir: &Path, images: &str, labels: &str, split: Split) -> Result<Dataset> {
    let ip = dir.join(images);
    let lp = dir.join(labels);
    let x = parse_idx_images(&read(&ip)?, &ip)?;
    let y = parse_idx_labels(&read(&lp)?, &lp)?;
    if x.shape()[0] != y.len() {
        return Err(Error::data(
            &ip,
            format!("{} images but {} labels", x.shape()[0], y.len()),
        ));
    }
    if let Some(&bad) = y.iter().find(|&&v| v >= 10) {
        return Err(Error::data(&lp, format!("label {bad} out of range")));
    }
    Dataset::new(x, y, 10, split, Normalization::mnist())
}

/// Loads `(train, test)` from the four standard IDX files in `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx_pair(dir, MNIST_FILES[0], MNIST_FILES[1], Split::Train)?;
    let test = load_idx_pair(dir, MNIST_FILES[2], MNIST_FILES[3], Split::Test)?;
    Ok((train, test))
}

/// Parses concatenated CIFAR-10 records (`label byte + 3072 RGB planes`).
pub fn parse_cifar_records(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::data(
            path,
            format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks(CIFAR_RECORD) {
        if rec[0] >= 10 {
            return Err(Error::data(path, format!("label {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

fn load_cifar_files(dir: &Path, names: &[String], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in names {
        let p = dir.join(name);
        let (px, lb) = parse_cifar_records(&read(&p)?, &p)?;
        pixels.extend(px);
        labels.extend(lb);
    }
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, 3, 32, 32], pixels)?,
        labels,
        10,
        split,
        Normalization::cifar10(),
    )
}

/// Loads CIFAR-10 from `data_batch_{1..5}.bin` and `test_batch.bin` in `dir`
/// (or its `cifar-10-batches-bin` subdirectory).
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let nested = dir.join("cifar-10-batches-bin");
    let dir: PathBuf = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let train_names: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    let train = load_cifar_files(&dir, &train_names, Split::Train)?;
    let test = load_cifar_files(&dir, &["test_batch.bin".to_string()], Split::Test)?;
    Ok((train, test))
}

/// Seeded permutation of `0..n` for one epoch. The generator is ChaCha8 with
/// the epoch as stream id, so every `(seed, epoch)` pair is independent.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Index lists of the minibatches of one epoch; the last batch may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let bs = batch_size.max(1);
    epoch_permutation(n, seed, epoch)
        .chunks(bs)
        .map(|c| c.to_vec())
        .collect()
}

/// Random horizontal flip plus 4-pixel padded random crop, for CIFAR-style
/// training. Deterministic in `(seed, epoch)`.
pub fn augment(images: &Tensor<f32>, seed: u64, epoch: u64) -> Tensor<f32> {
    use rand::Rng;
    let s = images.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa076_1d64_78bd_642f);
    rng.set_stream(epoch);
    let mut out = Tensor::zeros(&s);
    let plane = c * h * w;
    for n in 0..s[0] {
        let flip = rng.gen_bool(0.5);
        let dy = rng.gen_range(0..=8) as isize - 4;
        let dx = rng.gen_range(0..=8) as isize - 4;
        let src = &images.data()[n * plane..(n + 1) * plane];
        let dst = &mut out.data_mut()[n * plane..(n + 1) * plane];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = if flip { (w - 1 - x) as isize } else { x as isize };
                    let sx = sx0 + dx;
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        dst[ch * h * w + y * w + x] = src[ch * h * w + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    out
}
