//! CSV schemas for training histories and layer summaries.

use std::io::Write;

use aswl::pruning::pruning_ratio;
use aswl::train::{EpochMetrics, IterationMetrics};
use aswl::{Model, Result};

pub const METRICS_HEADER: [&str; 8] = [
    "epoch",
    "iteration",
    "train_acc",
    "val_acc",
    "ce_loss",
    "sparsity_reg",
    "l2_term",
    "global_pruned_ratio",
];

pub const LAYERS_HEADER: [&str; 6] = [
    "layer_index",
    "layer_kind",
    "n_w",
    "attention",
    "pruning_ratio",
    "mask_zeros",
];

pub const ITERATIONS_HEADER: [&str; 8] = [
    "iteration",
    "loss",
    "ce_loss",
    "sparsity_reg",
    "l2_term",
    "batch_acc",
    "global_pruned_ratio",
    "attentions",
];

fn csv_err(e: csv::Error) -> aswl::Error {
    aswl::Error::Io(std::io::Error::other(e))
}

pub fn metrics_row(m: &EpochMetrics) -> Vec<String> {
    vec![
        m.epoch.to_string(),
        m.iteration.to_string(),
        format!("{:.6}", m.train_acc),
        format!("{:.6}", m.val_acc),
        format!("{:.8}", m.ce_loss),
        format!("{:.8}", m.sparsity_reg),
        format!("{:.8}", m.l2_term),
        format!("{:.6}", m.global_pruned_ratio),
    ]
}

pub fn iteration_row(m: &IterationMetrics) -> Vec<String> {
    let attentions: Vec<String> = m.attentions.iter().map(|a| format!("{a:.6}")).collect();
    vec![
        m.iteration.to_string(),
        format!("{:.8}", m.loss.total),
        format!("{:.8}", m.loss.ce),
        format!("{:.8}", m.loss.sparsity_reg),
        format!("{:.8}", m.loss.l2_term),
        format!("{:.6}", m.batch_accuracy),
        format!("{:.6}", m.global_pruned_ratio),
        attentions.join(";"),
    ]
}

/// One row per prunable layer; `pruning_ratio` comes from the attention,
/// `mask_zeros` from the mask currently stored.
pub fn layer_rows(model: &Model<f32>, alpha: f64) -> Result<Vec<Vec<String>>> {
    model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let a = f64::from(l.attention());
            Ok(vec![
                i.to_string(),
                l.kind().name().to_string(),
                l.n_w().to_string(),
                format!("{a:.6}"),
                format!("{:.6}", pruning_ratio(a, alpha)?),
                l.mask_zeros().to_string(),
            ])
        })
        .collect()
}

pub fn write_csv<W: Write>(out: W, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
