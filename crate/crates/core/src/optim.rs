//! Adam and SGD-with-momentum over flat parameter slices.

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::Sgd { momentum }
    }
}

/// Per-parameter moment buffers. `second` stays empty for SGD.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub first: Vec<T>,
    pub second: Vec<T>,
}

/// Optimizer with one moment slot per parameter tensor, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T: Real = f32> {
    kind: OptimizerKind,
    step: u64,
    slots: Vec<Moments<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, sizes: &[usize]) -> Self {
        let slots = sizes
            .iter()
            .map(|&n| Moments {
                first: vec![T::zero(); n],
                second: match kind {
                    OptimizerKind::Adam { .. } => vec![T::zero(); n],
                    OptimizerKind::Sgd { .. } => Vec::new(),
                },
            })
            .collect();
        Self { kind, step: 0, slots }
    }

    pub fn from_parts(kind: OptimizerKind, step: u64, slots: Vec<Moments<T>>) -> Self {
        Self { kind, step, slots }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn slots(&self) -> &[Moments<T>] {
        &self.slots
    }

    /// Starts a new update round; every slot updated afterwards shares the
    /// same bias-correction step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, slot: usize, params: &mut [T], grads: &[T], lr: T) -> Result<()> {
        let step = self.step;
        let kind = self.kind;
        let m = self
            .slots
            .get_mut(slot)
            .ok_or_else(|| Error::State(format!("optimizer has no slot {slot}")))?;
        if m.first.len() != params.len() || grads.len() != params.len() {
            return Err(Error::dim(format!(
                "optimizer slot {slot}: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                m.first.len()
            )));
        }
        match kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if step == 0 {
                    return Err(Error::State("adam update before begin_step".into()));
                }
                adam_step(
                    params,
                    grads,
                    &mut m.first,
                    &mut m.second,
                    step,
                    lr,
                    T::of(beta1),
                    T::of(beta2),
                    T::of(eps),
                );
            }
            OptimizerKind::Sgd { momentum } => {
                sgd_step(params, grads, &mut m.first, lr, T::of(momentum));
            }
        }
        Ok(())
    }
}

/// Bias-corrected Adam update for step `t ≥ 1`.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
) {
    let one = T::one();
    let exp = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = one - beta1.powi(exp);
    let c2 = one - beta2.powi(exp);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (one - beta1) * g;
        v[i] = beta2 * v[i] + (one - beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Heavy-ball SGD: `v = μv + g; p -= lr·v`.
pub fn sgd_step<T: Real>(params: &mut [T], grads: &[T], velocity: &mut [T], lr: T, momentum: T) {
    for i in 0..params.len() {
        velocity[i] = momentum * velocity[i] + grads[i];
        params[i] -= lr * velocity[i];
    }
}
