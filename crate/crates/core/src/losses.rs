//! Cross-entropy plus the intra-space regularizer.
//!
//! The intra-space term penalizes conceptual embeddings that collapse onto a
//! single point: for each space it takes the population variance of the
//! masked token rows of `C_i` (per latent dimension, averaged) and adds
//! `1 / (σ² + ε)`. Per example the terms are averaged over spaces, then over
//! the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::ForwardTrace;

pub const DEFAULT_VARIANCE_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub intra_weight: f64,
    pub variance_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            intra_weight: 0.0,
            variance_epsilon: DEFAULT_VARIANCE_EPSILON,
        }
    }
}

impl LossConfig {
    pub fn with_intra_weight(intra_weight: f64) -> Self {
        LossConfig {
            intra_weight,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.intra_weight >= 0.0 && self.intra_weight.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "intra_weight must be finite and >= 0, got {}",
                self.intra_weight
            )));
        }
        if !(self.variance_epsilon > 0.0 && self.variance_epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "variance_epsilon must be finite and > 0, got {}",
                self.variance_epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub intra_space: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(cross_entropy: f64, intra_space: f64, config: &LossConfig) -> Self {
        LossBreakdown {
            cross_entropy,
            intra_space,
            total: cross_entropy + config.intra_weight * intra_space,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.cross_entropy.is_finite() && self.intra_space.is_finite() && self.total.is_finite()
    }
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let mut sum = 0.0;
    for e in &exps {
        sum += e;
    }
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            n_classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &l in logits {
        sum += (l - max).exp();
    }
    Ok((max - logits[label] + sum.ln()).max(0.0))
}

/// `(1/n_spaces) · Σ_i 1/(σ²_i + ε)` for one example.
pub fn example_intra_space(trace: &ForwardTrace, mask: &[bool], config: &LossConfig) -> Result<f64> {
    if trace.attributions.is_empty() {
        return Err(Error::EmptyInput("trace has no spaces"));
    }
    let mut acc = 0.0;
    for c in &trace.attributions {
        let var = c.masked_row_variance(mask)?;
        acc += 1.0 / (var + config.variance_epsilon);
    }
    Ok(acc / trace.attributions.len() as f64)
}

pub fn intra_space_loss(traces: &[ForwardTrace], masks: &[&[bool]], config: &LossConfig) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::EmptyInput("intra-space loss over an empty batch"));
    }
    check_batch(traces.len(), masks.len())?;
    let mut acc = 0.0;
    for (t, m) in traces.iter().zip(masks) {
        acc += example_intra_space(t, m, config)?;
    }
    Ok(acc / traces.len() as f64)
}

/// Mean cross-entropy over the batch plus `λ ·` intra-space loss. The
/// intra-space value is always reported; with `λ = 0` it adds exactly zero.
pub fn total_loss(
    traces: &[ForwardTrace],
    masks: &[&[bool]],
    labels: &[usize],
    config: &LossConfig,
) -> Result<LossBreakdown> {
    if traces.is_empty() {
        return Err(Error::EmptyInput("loss over an empty batch"));
    }
    check_batch(traces.len(), masks.len())?;
    check_batch(traces.len(), labels.len())?;
    let mut ce = 0.0;
    for (t, &label) in traces.iter().zip(labels) {
        ce += cross_entropy(&t.logits, label)?;
    }
    ce /= traces.len() as f64;
    let intra = intra_space_loss(traces, masks, config)?;
    Ok(LossBreakdown::combine(ce, intra, config))
}

fn check_batch(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape {
            op: "batch",
            left: (expected, 1),
            right: (got, 1),
        });
    }
    Ok(())
}
