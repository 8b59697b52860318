//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward rule. [`Tape::backward`] replays the nodes in
//! reverse order, visiting each one at most once. The tape is rebuilt every
//! iteration: call [`Tape::reset`] and record again.

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`]. Handles from before a
/// [`Tape::reset`] are rejected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    generation: u32,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
        patches: Vec<T>,
    },
    Gate {
        input: Var,
        gate: Var,
    },
    Relu(Var),
    AddBias(Var, Var),
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Reshape(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    SumOfSquares(Vec<Var>),
    Scale(Var, T),
    Add(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    generation: u32,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            generation: 0,
        }
    }

    /// Drops every recorded node. Previously issued [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.generation = self.generation.wrapping_add(1);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input (no gradient is produced for it).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable input whose gradient [`Tape::backward`] reports.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.node(v).map(|n| &n.value)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.generation != self.generation {
            return Err(Error::State(
                "variable belongs to a tape generation that was reset".into(),
            ));
        }
        self.nodes
            .get(v.index)
            .ok_or_else(|| Error::State(format!("variable {} was never recorded", v.index)))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            index: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    fn record(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut requires_grad = false;
        for &v in inputs {
            requires_grad |= self.node(v)?.requires_grad;
        }
        Ok(self.push(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a)?, self.value(b)?)?;
        self.record("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (out, patches, geom) =
            ops::conv2d_with_patches(self.value(input)?, self.value(kernel)?, stride, padding)?;
        let op = Op::Conv2d {
            input,
            kernel,
            geom,
            patches,
        };
        self.record("conv2d", out, op, &[input, kernel])
    }

    /// Multiplies every element of `input` by the one-element tensor `gate`.
    pub fn scalar_gate(&mut self, input: Var, gate: Var) -> Result<Var> {
        let a = self.value(gate)?.item()?;
        let out = ops::scale(self.value(input)?, a);
        self.record("scalar_gate", out, Op::Gate { input, gate }, &[input, gate])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = ops::relu(self.value(x)?);
        self.record("relu", out, Op::Relu(x), &[x])
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = ops::add_bias(self.value(x)?, self.value(bias)?)?;
        self.record("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn max_pool(&mut self, x: Var, size: usize) -> Result<Var> {
        let (out, argmax) = ops::max_pool(self.value(x)?, size)?;
        self.record("max_pool", out, Op::MaxPool { input: x, argmax }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x)?.clone().reshape(shape)?;
        self.record("reshape", out, Op::Reshape(x), &[x])
    }

    /// Mean cross-entropy of `logits[N×classes]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits)?, labels)?;
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.record("softmax_cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// `Σ x²` over every element of every listed tensor.
    pub fn sum_of_squares(&mut self, xs: &[Var]) -> Result<Var> {
        let mut total = T::zero();
        for &x in xs {
            total += self.value(x)?.data().iter().map(|&v| v * v).sum::<T>();
        }
        self.record("sum_of_squares", Tensor::scalar(total), Op::SumOfSquares(xs.to_vec()), xs)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = ops::scale(self.value(x)?, c);
        self.record("scale", out, Op::Scale(x, c), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a)?, self.value(b)?);
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!(
                "add of mismatched shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.record("add", out, Op::Add(a, b), &[a, b])
    }

    /// Gradients of the scalar `loss` with respect to every parameter
    /// recorded before it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward on a tape with no recorded operations".into()));
        }
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }

        let mut slots: Vec<Option<Tensor<T>>> = Vec::new();
        slots.resize_with(loss.index + 1, || None);
        slots[loss.index] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));

        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                slots[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = slots[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut slots)?;
        }

        let mut out = Gradients {
            slots,
            generation: self.generation,
        };
        for (i, node) in self.nodes.iter().enumerate().take(loss.index + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && out.slots[i].is_none() {
                out.slots[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, slots: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.index].value;
        let wants = |v: Var| self.nodes[v.index].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = ops::dims2(val(*a), "matmul lhs")?;
                let n = val(*b).shape()[1];
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), false, val(*b).data(), true, &mut da, false);
                    accumulate(slots, *a, Tensor::new(vec![m, k], da)?);
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, val(*a).data(), true, g.data(), false, &mut db, false);
                    accumulate(slots, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                patches,
            } => {
                let (rows, cols, c_out) = (geom.patch_rows(), geom.patch_cols(), geom.c_out);
                if wants(*kernel) {
                    let mut dk = vec![T::zero(); cols * c_out];
                    T::gemm(cols, rows, c_out, patches, true, g.data(), false, &mut dk, false);
                    accumulate(slots, *kernel, Tensor::new(val(*kernel).shape().to_vec(), dk)?);
                }
                if wants(*input) {
                    let mut dp = vec![T::zero(); rows * cols];
                    T::gemm(rows, c_out, cols, g.data(), false, val(*kernel).data(), true, &mut dp, false);
                    let dx = ops::col2im(&dp, geom);
                    accumulate(slots, *input, Tensor::new(val(*input).shape().to_vec(), dx)?);
                }
            }
            Op::Gate { input, gate } => {
                let a = val(*gate).data()[0];
                if wants(*gate) {
                    let da: T = g.data().iter().zip(val(*input).data()).map(|(&d, &t)| d * t).sum();
                    accumulate(slots, *gate, Tensor::new(val(*gate).shape().to_vec(), vec![da])?);
                }
                if wants(*input) {
                    accumulate(slots, *input, ops::scale(g, a));
                }
            }
            Op::Relu(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                accumulate(slots, *x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::AddBias(x, bias) => {
                if wants(*bias) {
                    let c = val(*bias).numel();
                    let mut db = vec![T::zero(); c];
                    for row in g.data().chunks_exact(c.max(1)) {
                        for (acc, &d) in db.iter_mut().zip(row) {
                            *acc += d;
                        }
                    }
                    accumulate(slots, *bias, Tensor::new(vec![c], db)?);
                }
                if wants(*x) {
                    accumulate(slots, *x, g.clone());
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = Tensor::zeros(val(*input).shape().to_vec());
                let buf = dx.data_mut();
                for (&d, &i) in g.data().iter().zip(argmax) {
                    buf[i as usize] += d;
                }
                accumulate(slots, *input, dx);
            }
            Op::Reshape(x) => {
                accumulate(slots, *x, g.clone().reshape(val(*x).shape().to_vec())?);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let shape = val(*logits).shape().to_vec();
                let k = shape[1];
                let s = g.data()[0] / T::of(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * s).collect();
                for (row, &label) in labels.iter().enumerate() {
                    d[row * k + label] -= s;
                }
                accumulate(slots, *logits, Tensor::new(shape, d)?);
            }
            Op::SumOfSquares(xs) => {
                let two_s = T::of(2.0) * g.data()[0];
                for &x in xs {
                    if wants(x) {
                        accumulate(slots, x, val(x).map(|v| two_s * v));
                    }
                }
            }
            Op::Scale(x, c) => accumulate(slots, *x, ops::scale(g, *c)),
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(slots, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(slots, *b, g.clone());
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(slots: &mut [Option<Tensor<T>>], v: Var, grad: Tensor<T>) {
    match &mut slots[v.index] {
        Some(existing) => {
            for (e, &d) in existing.data_mut().iter_mut().zip(grad.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(grad),
    }
}

/// Result of a backward pass: one gradient per recorded parameter.
pub struct Gradients<T: Real = f32> {
    slots: Vec<Option<Tensor<T>>>,
    generation: u32,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a parameter; `None` for constants and intermediates.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.generation != self.generation {
            return None;
        }
        self.slots.get(v.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.generation != self.generation {
            return None;
        }
        self.slots.get_mut(v.index).and_then(Option::take)
    }
}
