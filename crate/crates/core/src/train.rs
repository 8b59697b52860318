//! The simultaneous structure/weight training iteration.
//!
//! Each step: (1) pruning ratios from the current attentions, (2) magnitude
//! pruning of every layer, (3) forward pass on the compressed weights with
//! loss `CE + γΨ(A) + λΣŵ²`, (4) backward pass and optimizer update. Weight
//! gradients taken w.r.t. `ŵ` are applied to the dense weights through the
//! mask; attention gradients add the closed-form `γ·dΨ/da` to the tape's.

use std::fmt::Write as _;

use crate::data::{batches, Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ops;
use crate::optim::{Optimizer, OptimizerKind};
use crate::pruning::{self, global_pruned_ratio};
use crate::tape::Tape;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Pruning factor α in `p = (1 - a)^α`.
    pub alpha: f64,
    /// Sparsity regularizer coefficient γ.
    pub gamma: f64,
    /// L2 coefficient λ on the compressed weights.
    pub lambda: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Validation accuracy every this many iterations (0 = per epoch only).
    pub eval_every: usize,
    /// Keep attentions fixed (dense-baseline runs).
    pub freeze_attention: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: 0.5,
            lambda: 5e-4,
            optimizer: OptimizerKind::adam(),
            lr: 1e-3,
            lr_decay: 0.98,
            epochs: 5,
            batch_size: 64,
            seed: 0,
            eval_every: 0,
            freeze_attention: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Input(msg));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be > 0, got {}", self.alpha));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return bad(format!("learning-rate decay must be > 0, got {}", self.lr_decay));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        match self.optimizer {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps.is_nan() || eps <= 0.0 {
                    return bad("adam needs beta1, beta2 in [0, 1) and eps > 0".into());
                }
            }
            OptimizerKind::Sgd { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return bad(format!("momentum must lie in [0, 1), got {momentum}"));
                }
            }
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }

    /// `key=value` lines; floats use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "alpha={:?}", self.alpha);
        let _ = writeln!(s, "gamma={:?}", self.gamma);
        let _ = writeln!(s, "lambda={:?}", self.lambda);
        match self.optimizer {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let _ = writeln!(s, "optimizer=adam\nbeta1={beta1:?}\nbeta2={beta2:?}\neps={eps:?}");
            }
            OptimizerKind::Sgd { momentum } => {
                let _ = writeln!(s, "optimizer=sgd\nmomentum={momentum:?}");
            }
        }
        let _ = writeln!(s, "lr={:?}", self.lr);
        let _ = writeln!(s, "lr_decay={:?}", self.lr_decay);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "eval_every={}", self.eval_every);
        let _ = writeln!(s, "freeze_attention={}", self.freeze_attention);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let (mut opt, mut beta1, mut beta2, mut eps, mut momentum) = ("adam", 0.9, 0.999, 1e-8, 0.0);
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |field: &str, message: &str| Error::Parse {
                line: i + 1,
                field: field.to_string(),
                message: message.to_string(),
            };
            let (key, value) = line.split_once('=').ok_or_else(|| err(line, "expected key=value"))?;
            let f = || value.parse::<f64>().map_err(|_| err(key, "not a number"));
            let u = || value.parse::<u64>().map_err(|_| err(key, "not an unsigned integer"));
            match key {
                "alpha" => cfg.alpha = f()?,
                "gamma" => cfg.gamma = f()?,
                "lambda" => cfg.lambda = f()?,
                "optimizer" => {
                    opt = match value {
                        "adam" => "adam",
                        "sgd" => "sgd",
                        _ => return Err(err(key, "expected adam or sgd")),
                    }
                }
                "beta1" => beta1 = f()?,
                "beta2" => beta2 = f()?,
                "eps" => eps = f()?,
                "momentum" => momentum = f()?,
                "lr" => cfg.lr = f()?,
                "lr_decay" => cfg.lr_decay = f()?,
                "epochs" => cfg.epochs = u()? as usize,
                "batch_size" => cfg.batch_size = u()? as usize,
                "seed" => cfg.seed = u()?,
                "eval_every" => cfg.eval_every = u()? as usize,
                "freeze_attention" => {
                    cfg.freeze_attention = value.parse().map_err(|_| err(key, "expected true or false"))?
                }
                other => return Err(err(other, "unknown key")),
            }
        }
        cfg.optimizer = if opt == "adam" {
            OptimizerKind::Adam { beta1, beta2, eps }
        } else {
            OptimizerKind::Sgd { momentum }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Loss value and its parts: `total = ce + sparsity_reg + l2_term`, where
/// `sparsity_reg = γΨ` and `l2_term = λΣŵ²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts<T = f64> {
    pub ce: T,
    pub sparsity_reg: T,
    pub l2_term: T,
    pub total: T,
}

/// Gradients for every trainable quantity, already mapped to the dense
/// weights (masked positions are zero).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradients<T> {
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
    /// Tape gradient plus `γ·dΨ/da`.
    pub attentions: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub loss: LossParts,
    pub global_pruned_ratio: f64,
    /// Ratios `p_l` applied in this iteration.
    pub layer_ratios: Vec<f64>,
    /// Attentions after the update.
    pub attentions: Vec<f64>,
    pub batch_accuracy: f64,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Iterations completed so far.
    pub iteration: u64,
    /// Running accuracy over this epoch's training batches.
    pub train_acc: f64,
    /// NaN when no validation set was given.
    pub val_acc: f64,
    /// Epoch means of the loss parts.
    pub ce_loss: f64,
    pub sparsity_reg: f64,
    pub l2_term: f64,
    pub global_pruned_ratio: f64,
    pub layer_ratios: Vec<f64>,
    pub attentions: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochMetrics>,
    pub iterations: Vec<IterationMetrics>,
}

/// Loss on the current compressed weights computed without the tape.
pub fn loss_value<T: Real>(model: &Model<T>, batch: &Batch<T>, config: &TrainConfig) -> Result<LossParts<T>> {
    let logits = model.forward(&batch.images)?;
    let (ce, _) = ops::softmax_cross_entropy(&logits, &batch.labels)?;
    let psi = {
        let s = pruning::model_sparsity(&model.attention_vector(), &model.weight_counts(), T::of(config.alpha))?;
        s * s
    };
    let sq: T = model
        .layers()
        .iter()
        .flat_map(|l| l.compressed().data().iter())
        .map(|&w| w * w)
        .sum();
    let sparsity_reg = T::of(config.gamma) * psi;
    let l2_term = T::of(config.lambda) * sq;
    Ok(LossParts {
        ce,
        sparsity_reg,
        l2_term,
        total: ce + sparsity_reg + l2_term,
    })
}

/// Forward and backward on the current masks, without changing the model.
/// Also returns the number of correctly classified samples.
pub fn compute_gradients<T: Real>(
    model: &Model<T>,
    batch: &Batch<T>,
    config: &TrainConfig,
) -> Result<(LossParts<T>, ModelGradients<T>, usize)> {
    let mut tape = Tape::new();
    let (logits, vars) = model.record(&mut tape, &batch.images)?;
    let correct = ops::argmax_rows(tape.value(logits)?)?
        .iter()
        .zip(&batch.labels)
        .filter(|(p, l)| p == l)
        .count();
    let ce = tape.softmax_cross_entropy(logits, &batch.labels)?;
    let w_hats: Vec<_> = vars.iter().map(|v| v.w_hat).collect();
    let sq = tape.sum_of_squares(&w_hats)?;
    let l2 = tape.scale(sq, T::of(config.lambda))?;
    let loss = tape.add(ce, l2)?;
    let mut grads = tape.backward(loss)?;

    let attentions = model.attention_vector();
    let counts = model.weight_counts();
    let alpha = T::of(config.alpha);
    let gamma = T::of(config.gamma);
    let (psi, psi_grad) = if config.gamma > 0.0 {
        pruning::sparsity_regularizer(&attentions, &counts, alpha)?
    } else {
        let s = pruning::model_sparsity(&attentions, &counts, alpha)?;
        (s * s, vec![T::zero(); attentions.len()])
    };

    let mut out = ModelGradients {
        weights: Vec::with_capacity(vars.len()),
        biases: Vec::with_capacity(vars.len()),
        attentions: Vec::with_capacity(vars.len()),
    };
    for ((layer, v), dpsi) in model.layers().iter().zip(&vars).zip(&psi_grad) {
        let gw = grads.take(v.w_hat).ok_or_else(|| Error::State("missing weight gradient".into()))?;
        let mut gw = gw.into_data();
        for (g, &keep) in gw.iter_mut().zip(layer.mask()) {
            if !keep {
                *g = T::zero();
            }
        }
        out.weights.push(gw);
        let gb = grads.take(v.bias).ok_or_else(|| Error::State("missing bias gradient".into()))?;
        out.biases.push(gb.into_data());
        let ga = grads
            .take(v.attention)
            .ok_or_else(|| Error::State("missing attention gradient".into()))?
            .item()?;
        out.attentions.push(ga + gamma * *dpsi);
    }

    let ce_v = tape.value(ce)?.item()?;
    let l2_v = tape.value(l2)?.item()?;
    let sparsity_reg = gamma * psi;
    let parts = LossParts {
        ce: ce_v,
        sparsity_reg,
        l2_term: l2_v,
        total: ce_v + sparsity_reg + l2_v,
    };
    Ok((parts, out, correct))
}

/// Model, optimizer state and progress counters for one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer<T: Real = f32> {
    pub model: Model<T>,
    pub optimizer: Optimizer<T>,
    pub config: TrainConfig,
    /// Completed iterations.
    pub iteration: u64,
    /// Completed epochs.
    pub epoch: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let sizes: Vec<usize> = model
            .layers()
            .iter()
            .flat_map(|l| [l.n_w(), l.bias().numel(), 1])
            .collect();
        let optimizer = Optimizer::new(config.optimizer, &sizes);
        Ok(Self {
            model,
            optimizer,
            config,
            iteration: 0,
            epoch: 0,
        })
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.epoch)
    }

    /// Prunes every layer at `p_l = min((1 - a_l)^α, 0.99)`; returns the ratios.
    pub fn prune(&mut self) -> Result<Vec<T>> {
        let alpha = T::of(self.config.alpha);
        let mut ratios = Vec::with_capacity(self.model.layers().len());
        for layer in self.model.layers_mut() {
            let p = pruning::pruning_ratio(layer.attention(), alpha)?;
            pruning::prune_layer(layer, p)?;
            ratios.push(p);
        }
        Ok(ratios)
    }

    /// One full iteration on `batch`.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<IterationMetrics> {
        if batch.labels.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let iteration = self.iteration + 1;
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Divergence {
                iteration,
                loss: f64::NAN,
            },
            other => other,
        };

        let ratios = self.prune()?;
        let pruned = global_pruned_ratio(&self.model);
        let (loss, grads, correct) = compute_gradients(&self.model, batch, &self.config).map_err(diverged)?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence {
                iteration,
                loss: loss.total.as_f64(),
            });
        }

        let lr = T::of(self.current_lr());
        let freeze = self.config.freeze_attention;
        self.optimizer.begin_step();
        for (i, layer) in self.model.layers_mut().iter_mut().enumerate() {
            let (w, b, a) = layer.params_mut();
            self.optimizer.update(3 * i, w, &grads.weights[i], lr)?;
            self.optimizer.update(3 * i + 1, b, &grads.biases[i], lr)?;
            if !freeze {
                self.optimizer
                    .update(3 * i + 2, std::slice::from_mut(a), &grads.attentions[i..=i], lr)?;
                layer.clamp_attention();
            }
            layer.refresh_compressed();
        }
        self.iteration = iteration;

        Ok(IterationMetrics {
            iteration,
            loss: LossParts {
                ce: loss.ce.as_f64(),
                sparsity_reg: loss.sparsity_reg.as_f64(),
                l2_term: loss.l2_term.as_f64(),
                total: loss.total.as_f64(),
            },
            global_pruned_ratio: pruned,
            layer_ratios: ratios.iter().map(|p| p.as_f64()).collect(),
            attentions: self.model.attention_vector().iter().map(|a| a.as_f64()).collect(),
            batch_accuracy: correct as f64 / batch.labels.len() as f64,
            val_acc: None,
        })
    }

    /// Seed of the shuffle for the given 0-based epoch.
    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        self.config
            .seed
            .wrapping_add((epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// One pass over `train`, then validation accuracy on `val`.
    pub fn train_epoch(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        mut on_iteration: impl FnMut(&IterationMetrics),
    ) -> Result<EpochMetrics> {
        let seed = self.epoch_seed(self.epoch);
        let (mut ce, mut reg, mut l2) = (0.0, 0.0, 0.0);
        let (mut correct, mut seen, mut steps) = (0.0, 0usize, 0usize);
        let mut last_ratios = Vec::new();
        for batch in batches::<T>(train, self.config.batch_size, seed, true)? {
            let mut m = self.train_step(&batch)?;
            if self.config.eval_every > 0 && m.iteration % self.config.eval_every as u64 == 0 {
                if let Some(val) = val {
                    m.val_acc = Some(evaluate(&self.model, val)?);
                }
            }
            ce += m.loss.ce;
            reg += m.loss.sparsity_reg;
            l2 += m.loss.l2_term;
            correct += m.batch_accuracy * batch.labels.len() as f64;
            seen += batch.labels.len();
            steps += 1;
            last_ratios = m.layer_ratios.clone();
            on_iteration(&m);
        }
        self.epoch += 1;
        let val_acc = match val {
            Some(v) => evaluate(&self.model, v)?,
            None => f64::NAN,
        };
        let steps_f = steps.max(1) as f64;
        Ok(EpochMetrics {
            epoch: self.epoch,
            iteration: self.iteration,
            train_acc: correct / seen.max(1) as f64,
            val_acc,
            ce_loss: ce / steps_f,
            sparsity_reg: reg / steps_f,
            l2_term: l2 / steps_f,
            global_pruned_ratio: global_pruned_ratio(&self.model),
            layer_ratios: last_ratios,
            attentions: self.model.attention_vector().iter().map(|a| a.as_f64()).collect(),
        })
    }
}

/// Runs `config.epochs` epochs from a fresh optimizer state.
pub fn train<T: Real>(
    model: Model<T>,
    train_set: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(Model<T>, TrainHistory)> {
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut history = TrainHistory::default();
    for _ in 0..config.epochs {
        let epoch = trainer.train_epoch(train_set, val, |m| history.iterations.push(m.clone()))?;
        history.epochs.push(epoch);
    }
    Ok((trainer.model, history))
}

/// Fraction of `dataset` classified correctly by the current compressed
/// weights and attentions.
pub fn evaluate<T: Real>(model: &Model<T>, dataset: &Dataset) -> Result<f64> {
    evaluate_with(dataset, |x| model.forward(x))
}

/// Accuracy of any batch classifier; ties in the logits go to the lowest
/// class index.
pub fn evaluate_with<T: Real>(
    dataset: &Dataset,
    mut forward: impl FnMut(&crate::tensor::Tensor<T>) -> Result<crate::tensor::Tensor<T>>,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    for batch in batches::<T>(dataset, 256, 0, false)? {
        let logits = forward(&batch.images)?;
        correct += ops::argmax_rows(&logits)?
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}
