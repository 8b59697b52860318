//! Sparse inference export and full training checkpoints.
//!
//! Sparse file (`ASWL`, little-endian):
//!
//! ```text
//! magic "ASWL" | version u16 | descriptor_len u32 | descriptor utf-8
//! layer_count u32
//! per layer: kind u8 (0 dense, 1 conv) | stride u32 | padding u32
//!            rank u8 | dims u32 × rank
//!            nnz u32 | indices u32 × nnz (strictly ascending) | values f32 × nnz
//!            bias_len u32 | bias f32 × bias_len
//! ```
//!
//! Stored values are `a_l · w` for surviving weights and biases are stored as
//! `a_l · b`; no attention field exists. Checkpoints (`ASWC`) carry dense
//! weights, masks, attentions, optimizer moments and counters.

use std::path::Path;

use crate::arch::{Architecture, LayerKind};
use crate::error::{Error, Result};
use crate::model::{linear, run_stages, AttentionLayer, Model};
use crate::optim::{Moments, Optimizer};
use crate::tensor::{Real, Tensor};
use crate::train::{TrainConfig, Trainer};

pub const SPARSE_MAGIC: &[u8; 4] = b"ASWL";
pub const SPARSE_VERSION: u16 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ASWC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SparseLayer<T = f32> {
    pub kind: LayerKind,
    pub shape: Vec<usize>,
    pub indices: Vec<u32>,
    pub values: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> SparseLayer<T> {
    pub fn n_w(&self) -> usize {
        self.shape.iter().product()
    }

    fn encoded_len(&self) -> usize {
        1 + 4 + 4 + 1 + 4 * self.shape.len() + 4 + 8 * self.indices.len() + 4 + 4 * self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseModel<T = f32> {
    pub arch: Architecture,
    pub layers: Vec<SparseLayer<T>>,
}

/// Folds attentions into the surviving weights and biases.
pub fn export_sparse<T: Real>(model: &Model<T>) -> SparseModel<T> {
    let layers = model
        .layers()
        .iter()
        .map(|layer| {
            let a = layer.attention();
            let (indices, values) = layer
                .mask()
                .iter()
                .zip(layer.weights().data())
                .enumerate()
                .filter(|(_, (&keep, _))| keep)
                .map(|(j, (_, &w))| (j as u32, a * w))
                .unzip();
            SparseLayer {
                kind: layer.kind(),
                shape: layer.weights().shape().to_vec(),
                indices,
                values,
                bias: layer.bias().data().iter().map(|&b| a * b).collect(),
            }
        })
        .collect();
    SparseModel {
        arch: model.arch().clone(),
        layers,
    }
}

impl<T: Real> SparseModel<T> {
    pub fn n_w(&self) -> usize {
        self.layers.iter().map(SparseLayer::n_w).sum()
    }

    pub fn nnz(&self) -> usize {
        self.layers.iter().map(|l| l.indices.len()).sum()
    }

    pub fn pruned_ratio(&self) -> f64 {
        1.0 - self.nnz() as f64 / self.n_w() as f64
    }

    /// Checks indices, value counts and shapes against the architecture.
    pub fn validate(&self) -> Result<()> {
        let specs = self.arch.layers();
        if specs.len() != self.layers.len() {
            return Err(Error::format(0, format!(
                "{} layers stored, architecture has {}",
                self.layers.len(),
                specs.len()
            )));
        }
        for (i, (layer, spec)) in self.layers.iter().zip(specs).enumerate() {
            if layer.kind != spec.kind || layer.shape != spec.weight || layer.bias.len() != spec.units {
                return Err(Error::format(0, format!("layer {i} does not match the architecture")));
            }
            if layer.values.len() != layer.indices.len() {
                return Err(Error::format(0, format!("layer {i}: value/index count mismatch")));
            }
            let n = layer.n_w();
            if layer.indices.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::format(0, format!("layer {i}: indices not strictly ascending")));
            }
            if layer.indices.last().is_some_and(|&j| j as usize >= n) {
                return Err(Error::format(0, format!("layer {i}: index out of bounds for {n} weights")));
            }
        }
        Ok(())
    }

    /// Dense folded weights for plain inference.
    pub fn to_inference(&self) -> Result<InferenceModel<T>> {
        self.validate()?;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let mut w = Tensor::zeros(l.shape.clone());
                let data = w.data_mut();
                for (&j, &v) in l.indices.iter().zip(&l.values) {
                    data[j as usize] = v;
                }
                let b = Tensor::new(vec![l.bias.len()], l.bias.clone())?;
                Ok((l.kind, w, b))
            })
            .collect::<Result<_>>()?;
        Ok(InferenceModel {
            arch: self.arch.clone(),
            layers,
        })
    }

    /// Exact size of the encoded file.
    pub fn encoded_len(&self) -> usize {
        let header = 4 + 2 + 4 + self.arch.to_descriptor().len() + 4;
        header + self.layers.iter().map(SparseLayer::encoded_len).sum::<usize>()
    }
}

impl SparseModel<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(SPARSE_MAGIC);
        out.extend_from_slice(&SPARSE_VERSION.to_le_bytes());
        put_str(&mut out, &self.arch.to_descriptor());
        put_u32(&mut out, self.layers.len());
        for l in &self.layers {
            let (tag, stride, padding) = kind_fields(l.kind);
            out.push(tag);
            put_u32(&mut out, stride);
            put_u32(&mut out, padding);
            out.push(l.shape.len() as u8);
            for &d in &l.shape {
                put_u32(&mut out, d);
            }
            put_u32(&mut out, l.indices.len());
            for &j in &l.indices {
                out.extend_from_slice(&j.to_le_bytes());
            }
            for &v in &l.values {
                v.write_le(&mut out);
            }
            put_u32(&mut out, l.bias.len());
            for &b in &l.bias {
                b.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != SPARSE_MAGIC {
            return Err(Error::format(0, "not an ASWL sparse model"));
        }
        let version = r.u16()?;
        if version != SPARSE_VERSION {
            return Err(Error::format(4, format!("unsupported sparse format version {version}")));
        }
        let arch = r.arch()?;
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let at = r.offset();
            let kind = kind_from(r.u8()?, r.u32()? as usize, r.u32()? as usize, at)?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let nnz = r.u32()? as usize;
            let idx_at = r.offset();
            let indices = (0..nnz).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if let Some(bad) = indices.windows(2).position(|w| w[0] >= w[1]) {
                return Err(Error::format(
                    (idx_at + 4 * (bad + 1)) as u64,
                    "indices not strictly ascending",
                ));
            }
            if let Some(bad) = indices.iter().position(|&j| j as usize >= n) {
                return Err(Error::format(
                    (idx_at + 4 * bad) as u64,
                    format!("index {} out of bounds for {n} weights", indices[bad]),
                ));
            }
            let values = r.reals::<f32>(nnz)?;
            let nb = r.u32()? as usize;
            let bias = r.reals::<f32>(nb)?;
            layers.push(SparseLayer {
                kind,
                shape,
                indices,
                values,
                bias,
            });
        }
        r.finish()?;
        let model = Self { arch, layers };
        model.validate()?;
        Ok(model)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Reads a sparse file and expands it for inference.
pub fn import_sparse(path: &Path) -> Result<InferenceModel<f32>> {
    SparseModel::read(path)?.to_inference()
}

/// Inference-only network with attentions folded into its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceModel<T: Real = f32> {
    arch: Architecture,
    layers: Vec<(LayerKind, Tensor<T>, Tensor<T>)>,
}

impl<T: Real> InferenceModel<T> {
    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = *x.shape().first().unwrap_or(&0);
        let mut shape = vec![n];
        shape.extend_from_slice(self.arch.input_shape());
        let x = x.clone().reshape(shape)?;
        run_stages(self.arch.stages(), x, |i, x| {
            let (kind, w, b) = &self.layers[i];
            linear(*kind, x, w, b)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompressionReport {
    /// f32 weights plus biases of the dense model.
    pub dense_bytes: usize,
    /// f32 weights of the dense model.
    pub dense_weight_bytes: usize,
    /// Surviving f32 values in the sparse file.
    pub value_bytes: usize,
    /// u32 indices in the sparse file.
    pub index_bytes: usize,
    /// Full sparse file size, headers included.
    pub sparse_bytes: usize,
    /// `dense_bytes / sparse_bytes`.
    pub ratio: f64,
}

pub fn report_compression<T: Real>(model: &Model<T>) -> CompressionReport {
    let sparse = export_sparse(model);
    let n_w: usize = model.weight_counts().iter().sum();
    let n_b: usize = model.layers().iter().map(|l| l.bias().numel()).sum();
    let nnz = sparse.nnz();
    let dense_bytes = 4 * (n_w + n_b);
    let sparse_bytes = sparse.encoded_len();
    CompressionReport {
        dense_bytes,
        dense_weight_bytes: 4 * n_w,
        value_bytes: 4 * nnz,
        index_bytes: 4 * nnz,
        sparse_bytes,
        ratio: dense_bytes as f64 / sparse_bytes as f64,
    }
}

pub fn checkpoint_bytes<T: Real>(trainer: &Trainer<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(T::DTYPE_TAG);
    put_str(&mut out, &trainer.model.arch().to_descriptor());
    put_str(&mut out, &trainer.config.to_text());
    out.extend_from_slice(&trainer.iteration.to_le_bytes());
    out.extend_from_slice(&(trainer.epoch as u64).to_le_bytes());
    out.extend_from_slice(&trainer.optimizer.step_count().to_le_bytes());
    put_u32(&mut out, trainer.model.layers().len());
    for l in trainer.model.layers() {
        put_reals(&mut out, l.weights().data());
        out.extend(l.mask().iter().map(|&m| u8::from(m)));
        put_reals(&mut out, l.bias().data());
        l.attention().write_le(&mut out);
    }
    put_u32(&mut out, trainer.optimizer.slots().len());
    for s in trainer.optimizer.slots() {
        put_reals(&mut out, &s.first);
        put_reals(&mut out, &s.second);
    }
    out
}

pub fn save_checkpoint<T: Real>(trainer: &Trainer<T>, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(trainer))?;
    Ok(())
}

pub fn checkpoint_from_bytes<T: Real>(bytes: &[u8]) -> Result<Trainer<T>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "not an ASWC checkpoint"));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let tag = r.u8()?;
    if tag != T::DTYPE_TAG {
        return Err(Error::format(6, format!(
            "checkpoint stores {tag}-byte reals, expected {}",
            T::DTYPE_TAG
        )));
    }
    let arch = r.arch()?;
    let cfg_at = r.offset();
    let config = TrainConfig::from_text(&r.string()?)
        .map_err(|e| Error::format(cfg_at as u64, format!("bad config: {e}")))?;
    let iteration = r.u64()?;
    let epoch = r.u64()? as usize;
    let step = r.u64()?;
    let count = r.u32()? as usize;
    if count != arch.layers().len() {
        return Err(Error::format(r.offset() as u64, "layer count does not match architecture"));
    }
    let mut layers = Vec::with_capacity(count);
    for spec in arch.layers() {
        let at = r.offset();
        let w = r.len_reals::<T>()?;
        let mask = r.take(w.len())?.iter().map(|&b| b != 0).collect();
        let bias = r.len_reals::<T>()?;
        let attention = r.real::<T>()?;
        let w = Tensor::new(spec.weight.clone(), w).map_err(|e| Error::format(at as u64, e.to_string()))?;
        let bias = Tensor::new(vec![spec.units], bias).map_err(|e| Error::format(at as u64, e.to_string()))?;
        layers.push(AttentionLayer::from_parts(spec.kind, w, mask, bias, attention)?);
    }
    let slots = (0..r.u32()? as usize)
        .map(|_| {
            Ok(Moments {
                first: r.len_reals::<T>()?,
                second: r.len_reals::<T>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let model = Model::from_layers(arch, layers)?;
    let mut trainer = Trainer::new(model, config)?;
    let expected: Vec<usize> = trainer.optimizer.slots().iter().map(|s| s.first.len()).collect();
    if slots.iter().map(|s| s.first.len()).collect::<Vec<_>>() != expected {
        return Err(Error::format(0, "optimizer state does not match the model"));
    }
    trainer.optimizer = Optimizer::from_parts(config_kind(&trainer.config), step, slots);
    trainer.iteration = iteration;
    trainer.epoch = epoch;
    Ok(trainer)
}

fn config_kind(c: &TrainConfig) -> crate::optim::OptimizerKind {
    c.optimizer
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Trainer<T>> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

fn kind_fields(kind: LayerKind) -> (u8, usize, usize) {
    match kind {
        LayerKind::Dense => (0, 0, 0),
        LayerKind::Conv2d { stride, padding } => (1, stride, padding),
    }
}

fn kind_from(tag: u8, stride: usize, padding: usize, at: usize) -> Result<LayerKind> {
    match tag {
        0 => Ok(LayerKind::Dense),
        1 => Ok(LayerKind::Conv2d { stride, padding }),
        t => Err(Error::format(at as u64, format!("unknown layer kind {t}"))),
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_reals<T: Real>(out: &mut Vec<u8>, xs: &[T]) {
    put_u32(out, xs.len());
    for &x in xs {
        x.write_le(out);
    }
}

/// Cursor over a byte buffer that reports failures with their offset.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn offset(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(self.bytes.len() as u64, format!("truncated: needed {n} bytes at {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn real<T: Real>(&mut self) -> Result<T> {
        Ok(T::read_le(self.take(T::BYTES)?))
    }

    fn reals<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(n.saturating_mul(T::BYTES))?;
        Ok(raw.chunks_exact(T::BYTES).map(T::read_le).collect())
    }

    fn len_reals<T: Real>(&mut self) -> Result<Vec<T>> {
        let n = self.u32()? as usize;
        self.reals(n)
    }

    fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(at as u64, "invalid utf-8"))
    }

    fn arch(&mut self) -> Result<Architecture> {
        let at = self.pos;
        Architecture::parse(&self.string()?)
            .map_err(|e| Error::format(at as u64, format!("bad architecture: {e}")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.pos as u64, format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}
