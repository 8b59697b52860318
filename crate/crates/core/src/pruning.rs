//! Attention-driven pruning ratios, the kept-weight fraction `S`, the square
//! sparsity regularizer `Ψ = S²` with its closed-form gradient, and magnitude
//! pruning of a single layer.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{AttentionLayer, Model};
use crate::tensor::Real;

/// No layer is ever pruned beyond this fraction.
pub const MAX_PRUNING_RATIO: f64 = 0.99;

/// `min((1 - a)^alpha, 0.99)` for `a ∈ (0, 1]`, `alpha > 0`.
pub fn pruning_ratio<T: Real>(a: T, alpha: T) -> Result<T> {
    check_domain(a, alpha)?;
    Ok(raw_ratio(a, alpha).min(T::of(MAX_PRUNING_RATIO)))
}

fn raw_ratio<T: Real>(a: T, alpha: T) -> T {
    (T::one() - a).powf(alpha)
}

fn check_domain<T: Real>(a: T, alpha: T) -> Result<()> {
    if !(a > T::zero() && a <= T::one()) {
        return Err(Error::Domain(format!("attention {a} outside (0, 1]")));
    }
    if !alpha.is_finite() || alpha <= T::zero() {
        return Err(Error::Domain(format!("pruning factor {alpha} must be positive")));
    }
    Ok(())
}

/// Number of weights removed at ratio `p`: `ceil(p · n)`. Products within a
/// few ulps of an integer snap to it, so `p = 0.3, n = 10` prunes 3.
pub fn prune_count<T: Real>(p: T, n: usize) -> usize {
    let x = p * T::of(n as f64);
    let nearest = x.round();
    let tol = T::of(8.0) * T::epsilon() * x.abs().max(T::one());
    let k = if (x - nearest).abs() <= tol { nearest } else { x.ceil() };
    k.as_f64().clamp(0.0, n as f64) as usize
}

/// Mask keeping all but the `ceil(p · n)` smallest-magnitude weights. Equal
/// magnitudes prune the lower flat index first.
pub fn magnitude_mask<T: Real>(w: &[T], p: T) -> Result<Vec<bool>> {
    if !(p >= T::zero() && p <= T::of(MAX_PRUNING_RATIO)) {
        return Err(Error::Domain(format!(
            "pruning ratio {p} outside [0, {MAX_PRUNING_RATIO}]"
        )));
    }
    let k = prune_count(p, w.len());
    let mut mask = vec![true; w.len()];
    if k == 0 {
        return Ok(mask);
    }
    let by_magnitude = |&i: &u32, &j: &u32| -> Ordering {
        w[i as usize]
            .abs()
            .partial_cmp(&w[j as usize].abs())
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    };
    let mut order: Vec<u32> = (0..w.len() as u32).collect();
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, by_magnitude);
    }
    for &i in &order[..k] {
        mask[i as usize] = false;
    }
    Ok(mask)
}

/// Recomputes the layer's mask from scratch at ratio `p` and refreshes its
/// compressed weights. Previously pruned weights may come back.
pub fn prune_layer<T: Real>(layer: &mut AttentionLayer<T>, p: T) -> Result<()> {
    if layer.weights().data().iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite { op: "prune_layer" });
    }
    let mask = magnitude_mask(layer.weights().data(), p)?;
    layer.set_mask(mask)
}

fn check_lists<T>(attentions: &[T], counts: &[usize]) -> Result<()> {
    if attentions.len() != counts.len() {
        return Err(Error::Input(format!(
            "{} attentions for {} layers",
            attentions.len(),
            counts.len()
        )));
    }
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::Input("weight counts must be non-empty and positive".into()));
    }
    Ok(())
}

/// Kept-weight fraction `S = Σ (1 - p_l) n_l / Σ n_l`.
pub fn model_sparsity<T: Real>(attentions: &[T], counts: &[usize], alpha: T) -> Result<T> {
    check_lists(attentions, counts)?;
    let total = T::of(counts.iter().sum::<usize>() as f64);
    let mut kept = T::zero();
    for (&a, &n) in attentions.iter().zip(counts) {
        kept += (T::one() - pruning_ratio(a, alpha)?) * T::of(n as f64);
    }
    Ok(kept / total)
}

/// `Ψ = S²` and `dΨ/da_l = 2S · α(1 - a_l)^(α-1) · n_l / Σn`, zero where the
/// ratio cap is active.
pub fn sparsity_regularizer<T: Real>(attentions: &[T], counts: &[usize], alpha: T) -> Result<(T, Vec<T>)> {
    let s = model_sparsity(attentions, counts, alpha)?;
    let total = T::of(counts.iter().sum::<usize>() as f64);
    let two_s = T::of(2.0) * s;
    let mut grad = Vec::with_capacity(attentions.len());
    for (&a, &n) in attentions.iter().zip(counts) {
        let base = T::one() - a;
        if raw_ratio(a, alpha) > T::of(MAX_PRUNING_RATIO) {
            grad.push(T::zero());
            continue;
        }
        let slope = if base == T::zero() {
            match alpha.partial_cmp(&T::one()) {
                Some(Ordering::Greater) => T::zero(),
                Some(Ordering::Equal) => T::one(),
                _ => {
                    return Err(Error::Domain(format!(
                        "regularizer gradient is unbounded at attention 1 for pruning factor {alpha} < 1"
                    )))
                }
            }
        } else {
            alpha * base.powf(alpha - T::one())
        };
        grad.push(two_s * slope * T::of(n as f64) / total);
    }
    Ok((s * s, grad))
}

/// Fraction of mask entries that are zero across all layers.
pub fn global_pruned_ratio<T: Real>(model: &Model<T>) -> f64 {
    let (zeros, total) = model
        .layers()
        .iter()
        .fold((0usize, 0usize), |(z, t), l| (z + l.mask_zeros(), t + l.n_w()));
    zeros as f64 / total as f64
}
