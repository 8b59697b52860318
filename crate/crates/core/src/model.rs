//! Prunable layers gated by a per-layer attention scalar, and the feed-forward
//! classifier that strings them together.
//!
//! Each layer keeps the dense weights `w` the optimizer updates, a binary mask
//! produced by magnitude pruning, and the compressed weights `w_hat = w ⊙ mask`
//! used in every forward pass. The layer output is `a · (op(x, w_hat) + b)`,
//! computed as `op(x, a·w_hat) + a·b` so that exporting folded weights
//! reproduces the same bits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{Architecture, LayerKind, LayerShape, StageSpec};
use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub const INITIAL_ATTENTION: f64 = 0.5;
/// Lower clamp for attentions after an optimizer step.
pub const ATTENTION_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer<T: Real = f32> {
    kind: LayerKind,
    w: Tensor<T>,
    w_hat: Tensor<T>,
    mask: Vec<bool>,
    bias: Tensor<T>,
    attention: T,
}

impl<T: Real> AttentionLayer<T> {
    /// A layer with a full mask (`w_hat == w`).
    pub fn new(kind: LayerKind, w: Tensor<T>, bias: Tensor<T>, attention: T) -> Result<Self> {
        let units = *w.shape().last().unwrap_or(&0);
        let rank_ok = match kind {
            LayerKind::Dense => w.shape().len() == 2,
            LayerKind::Conv2d { .. } => w.shape().len() == 4,
        };
        if !rank_ok || bias.shape() != [units] {
            return Err(Error::dim(format!(
                "{} layer with weight {:?} and bias {:?}",
                kind.name(),
                w.shape(),
                bias.shape()
            )));
        }
        if !(attention > T::zero() && attention <= T::one()) {
            return Err(Error::Domain(format!("attention {attention} outside (0, 1]")));
        }
        let mask = vec![true; w.numel()];
        Ok(Self {
            kind,
            w_hat: w.clone(),
            w,
            mask,
            bias,
            attention,
        })
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    /// Number of prunable weights; constant for the layer's lifetime.
    pub fn n_w(&self) -> usize {
        self.w.numel()
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.w
    }

    pub fn compressed(&self) -> &Tensor<T> {
        &self.w_hat
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    pub fn attention(&self) -> T {
        self.attention
    }

    pub fn mask_zeros(&self) -> usize {
        self.mask.iter().filter(|&&m| !m).count()
    }

    /// Installs a new mask and recomputes `w_hat`.
    pub fn set_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.n_w() {
            return Err(Error::dim(format!(
                "mask of {} entries for a layer of {} weights",
                mask.len(),
                self.n_w()
            )));
        }
        self.mask = mask;
        self.refresh_compressed();
        Ok(())
    }

    /// Masked positions are written as `+0.0` rather than `w · 0`, which
    /// could produce `-0.0`.
    pub(crate) fn refresh_compressed(&mut self) {
        for ((h, &w), &keep) in self.w_hat.data_mut().iter_mut().zip(self.w.data()).zip(&self.mask) {
            *h = if keep { w } else { T::zero() };
        }
    }

    pub fn set_attention(&mut self, a: T) {
        self.attention = a;
    }

    /// Clamps the attention into `[ATTENTION_FLOOR, 1]`.
    pub fn clamp_attention(&mut self) {
        self.attention = clamp_attention(self.attention);
    }

    /// Mutable dense weights, bias and attention for the optimizer. Callers
    /// must follow up with [`AttentionLayer::refresh_compressed`].
    pub(crate) fn params_mut(&mut self) -> (&mut [T], &mut [T], &mut T) {
        (self.w.data_mut(), self.bias.data_mut(), &mut self.attention)
    }

    pub(crate) fn from_parts(
        kind: LayerKind,
        w: Tensor<T>,
        mask: Vec<bool>,
        bias: Tensor<T>,
        attention: T,
    ) -> Result<Self> {
        let mut layer = Self::new(kind, w, bias, T::one())?;
        layer.attention = attention;
        layer.set_mask(mask)?;
        Ok(layer)
    }

    /// `a · (op(x, w_hat) + bias)` without recording gradients.
    pub fn attended_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = ops::scale(&self.w_hat, self.attention);
        let b = ops::scale(&self.bias, self.attention);
        linear(self.kind, x, &w, &b)
    }

    /// Records the attended layer on `tape`. `w_hat`, `bias` and the attention
    /// become parameters.
    pub fn record(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, LayerVars)> {
        let w_hat = tape.param(self.w_hat.clone());
        let bias = tape.param(self.bias.clone());
        let attention = tape.param(Tensor::scalar(self.attention));
        let w = tape.scalar_gate(w_hat, attention)?;
        let b = tape.scalar_gate(bias, attention)?;
        let z = match self.kind {
            LayerKind::Dense => tape.matmul(x, w)?,
            LayerKind::Conv2d { stride, padding } => tape.conv2d(x, w, stride, padding)?,
        };
        let out = tape.add_bias(z, b)?;
        Ok((
            out,
            LayerVars {
                w_hat,
                bias,
                attention,
            },
        ))
    }
}

/// Tape handles of one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub w_hat: Var,
    pub bias: Var,
    pub attention: Var,
}

pub fn clamp_attention<T: Real>(a: T) -> T {
    let floor = T::of(ATTENTION_FLOOR);
    if a.is_nan() {
        return floor;
    }
    a.max(floor).min(T::one())
}

/// Plain (ungated) dense or conv op plus bias.
pub fn linear<T: Real>(kind: LayerKind, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let z = match kind {
        LayerKind::Dense => ops::matmul(x, w)?,
        LayerKind::Conv2d { stride, padding } => ops::conv2d(x, w, stride, padding)?,
    };
    ops::add_bias(&z, b)
}

/// Feed-forward classifier: prunable layers interleaved with ReLU, pooling
/// and flatten stages as described by its [`Architecture`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    arch: Architecture,
    layers: Vec<AttentionLayer<T>>,
}

impl<T: Real> Model<T> {
    /// Fan-in scaled uniform weights (`±sqrt(6 / fan_in)`), zero biases,
    /// attentions at 0.5, full masks.
    pub fn build(arch: &Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .layers()
            .iter()
            .map(|shape| init_layer(shape, &mut rng))
            .collect();
        Self {
            arch: arch.clone(),
            layers,
        }
    }

    pub fn from_layers(arch: Architecture, layers: Vec<AttentionLayer<T>>) -> Result<Self> {
        if layers.len() != arch.layers().len()
            || layers
                .iter()
                .zip(arch.layers())
                .any(|(l, s)| l.weights().shape() != s.weight.as_slice() || l.kind() != s.kind)
        {
            return Err(Error::dim("layers do not match the architecture"));
        }
        Ok(Self { arch, layers })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[AttentionLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [AttentionLayer<T>] {
        &mut self.layers
    }

    /// The ordered attention list `A`.
    pub fn attention_vector(&self) -> Vec<T> {
        self.layers.iter().map(|l| l.attention).collect()
    }

    pub fn weight_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.n_w()).collect()
    }

    pub fn set_attentions(&mut self, a: T) {
        for l in &mut self.layers {
            l.attention = a;
        }
    }

    pub fn clamp_attentions(&mut self) {
        for l in &mut self.layers {
            l.clamp_attention();
        }
    }

    /// Reshapes a batch to `[N, input...]`, accepting any layout with the
    /// right per-sample element count.
    pub fn shape_input(&self, x: Tensor<T>) -> Result<Tensor<T>> {
        let n = *x.shape().first().unwrap_or(&0);
        let per: usize = self.arch.input_shape().iter().product();
        if n == 0 || x.numel() != n * per {
            return Err(Error::dim(format!(
                "input {:?} does not fit model input {:?}",
                x.shape(),
                self.arch.input_shape()
            )));
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.arch.input_shape());
        x.reshape(shape)
    }

    /// Logits on the compressed weights and attentions, without a tape.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.shape_input(x.clone())?;
        run_stages(self.arch.stages(), x, |i, x| self.layers[i].attended_forward(x))
    }

    /// Records the forward pass; returns the logits and every layer's
    /// parameter handles.
    pub fn record(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<(Var, Vec<LayerVars>)> {
        let input = self.shape_input(x.clone())?;
        let mut cur = tape.constant(input);
        let mut vars = Vec::with_capacity(self.layers.len());
        let mut next_layer = 0;
        for stage in self.arch.stages() {
            cur = match *stage {
                StageSpec::Conv { .. } | StageSpec::Dense { .. } => {
                    let (out, v) = self.layers[next_layer].record(tape, cur)?;
                    vars.push(v);
                    next_layer += 1;
                    out
                }
                StageSpec::Relu => tape.relu(cur)?,
                StageSpec::MaxPool { size } => tape.max_pool(cur, size)?,
                StageSpec::Flatten => {
                    let shape = tape.value(cur)?.shape().to_vec();
                    tape.reshape(cur, vec![shape[0], shape[1..].iter().product()])?
                }
            };
        }
        Ok((cur, vars))
    }
}

/// Applies the stage list, calling `layer(i, x)` for the i-th prunable layer.
pub(crate) fn run_stages<T: Real>(
    stages: &[StageSpec],
    mut x: Tensor<T>,
    mut layer: impl FnMut(usize, &Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let mut next_layer = 0;
    for stage in stages {
        x = match *stage {
            StageSpec::Conv { .. } | StageSpec::Dense { .. } => {
                let out = layer(next_layer, &x)?;
                next_layer += 1;
                out
            }
            StageSpec::Relu => ops::relu(&x),
            StageSpec::MaxPool { size } => ops::max_pool(&x, size)?.0,
            StageSpec::Flatten => {
                let n = x.shape()[0];
                let rest = x.numel() / n.max(1);
                x.reshape(vec![n, rest])?
            }
        };
    }
    Ok(x)
}

fn init_layer<T: Real>(shape: &LayerShape, rng: &mut ChaCha8Rng) -> AttentionLayer<T> {
    let bound = (6.0 / shape.fan_in as f64).sqrt();
    let n: usize = shape.weight.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    let w = Tensor::new(shape.weight.clone(), data).expect("shape product matches");
    let bias = Tensor::zeros(vec![shape.units]);
    AttentionLayer::new(shape.kind, w, bias, T::of(INITIAL_ATTENTION)).expect("valid layer")
}
