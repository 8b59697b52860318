//! MNIST (IDX) and CIFAR-10 (binary) ingestion, plus seeded batching.
//!
//! Pixels are scaled to `[0, 1]` with no centering. IDX files may be gzipped;
//! compression is detected from the stream header, not the file name.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 32 * 32 * 3;
/// Environment variable naming the dataset root.
pub const DATA_DIR_ENV: &str = "ASWL_DATA_DIR";
/// Trailing training images held out for validation.
pub const MNIST_VALIDATION: usize = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<u8>,
    classes: usize,
    split: Split,
}

impl Dataset {
    /// `images` is `N×H×W×C` in `[0, 1]`; every label must be `< classes`.
    pub fn new(images: Tensor<f32>, labels: Vec<u8>, classes: usize, split: Split) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Input(format!(
                "images {:?} with {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Input(format!("label {l} out of range for {classes} classes")));
        }
        if images.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Input("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// First `n` samples (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images.slice_rows(0, n).expect("in range"),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split,
        }
    }

    /// Splits off the last `n` samples as a validation set.
    pub fn split_tail(self, n: usize) -> Result<(Self, Self)> {
        if n >= self.len() {
            return Err(Error::Input(format!(
                "cannot hold out {n} of {} samples",
                self.len()
            )));
        }
        let cut = self.len() - n;
        let head = Self {
            images: self.images.slice_rows(0, cut)?,
            labels: self.labels[..cut].to_vec(),
            classes: self.classes,
            split: self.split,
        };
        let tail = Self {
            images: self.images.slice_rows(cut, self.len())?,
            labels: self.labels[cut..].to_vec(),
            classes: self.classes,
            split: Split::Val,
        };
        Ok((head, tail))
    }

    /// Samples at `indices`, converted to the model's scalar type.
    pub fn gather<T: Real>(&self, indices: &[usize]) -> Result<Batch<T>> {
        Ok(Batch {
            images: self.images.gather_rows(indices)?.cast(),
            labels: indices.iter().map(|&i| self.labels[i] as usize).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T: Real = f32> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Index order for one pass: a seeded permutation, or `0..n` when not
/// shuffling.
pub fn epoch_order(n: usize, seed: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

/// Iterator over consecutive batches; the final batch may be short.
pub struct Batches<'a, T: Real = f32> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    _scalar: std::marker::PhantomData<T>,
}

pub fn batches<T: Real>(dataset: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Result<Batches<'_, T>> {
    if batch_size == 0 {
        return Err(Error::Input("batch size must be at least 1".into()));
    }
    Ok(Batches {
        dataset,
        order: epoch_order(dataset.len(), seed, shuffle),
        batch_size,
        pos: 0,
        _scalar: std::marker::PhantomData,
    })
}

impl<T: Real> Iterator for Batches<'_, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self
            .dataset
            .gather(&self.order[self.pos..end])
            .expect("permutation indices are in range");
        self.pos = end;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| Error::format(bytes.len() as u64, "file truncated inside header"))
}

/// Parses IDX image bytes into `N×rows×cols×1` scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let expected = 16 + n * rows * cols;
    check_length(bytes.len(), expected)?;
    let data = bytes[16..].iter().map(|&b| f32::from(b) / 255.0).collect();
    Tensor::new(vec![n, rows, cols, 1], data)
}

/// Parses IDX label bytes; every label must be a digit `0..=9`.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    check_length(bytes.len(), 8 + n)?;
    let labels = bytes[8..].to_vec();
    if let Some(i) = labels.iter().position(|&l| l >= 10) {
        return Err(Error::format(
            (8 + i) as u64,
            format!("label {} out of range", labels[i]),
        ));
    }
    Ok(labels)
}

fn check_length(actual: usize, expected: usize) -> Result<()> {
    if actual < expected {
        return Err(Error::format(
            actual as u64,
            format!("file truncated: expected {expected} bytes"),
        ));
    }
    if actual > expected {
        return Err(Error::format(
            expected as u64,
            format!("{} unexpected trailing bytes", actual - expected),
        ));
    }
    Ok(())
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let images = parse_idx_images(&read_maybe_gz(images_path)?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::format(
            4,
            format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            ),
        ));
    }
    Dataset::new(images, labels, 10, split)
}

fn find_file(root: &Path, stem: &str) -> Result<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")]
        .iter()
        .map(|name| root.join(name))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{stem}[.gz] not found under {}", root.display()),
            ))
        })
}

/// Loads the standard MNIST file pair for `Train` or `Test` from `root`.
pub fn load_mnist(root: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
        Split::Val => return Err(Error::Input("validation data is split from train".into())),
    };
    let images = find_file(root, &format!("{prefix}-images-idx3-ubyte"))?;
    let labels = find_file(root, &format!("{prefix}-labels-idx1-ubyte"))?;
    load_mnist_idx(&images, &labels, split)
}

/// Parses CIFAR-10 binary records (label byte + 3072 channel-planar pixels)
/// into `N×32×32×3`.
pub fn parse_cifar10(bytes: &[u8], split: Split) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(Error::format(
            whole as u64,
            format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = vec![0f32; n * 3072];
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::format(
                (r * CIFAR_RECORD) as u64,
                format!("label {} out of range", rec[0]),
            ));
        }
        labels.push(rec[0]);
        let out = &mut data[r * 3072..(r + 1) * 3072];
        for c in 0..3 {
            for p in 0..1024 {
                out[p * 3 + c] = f32::from(rec[1 + c * 1024 + p]) / 255.0;
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, 32, 32, 3], data)?, labels, 10, split)
}

/// Loads `data_batch_{1..5}.bin` (train) or `test_batch.bin` (test) from
/// `dir` or its `cifar-10-batches-bin` subdirectory.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let nested = dir.join("cifar-10-batches-bin");
    let dir = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let names: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
        Split::Val => return Err(Error::Input("validation data is split from train".into())),
    };
    let mut bytes = Vec::new();
    for name in names {
        let chunk = std::fs::read(dir.join(&name))?;
        if chunk.len() % CIFAR_RECORD != 0 {
            return parse_cifar10(&chunk, split)
                .map_err(|e| Error::format(0, format!("{name}: {e}")));
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar10(&bytes, split)
}

/// Encodes images (`rows×cols` bytes each) in IDX format.
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
