//! Hand-derived reverse-mode gradients for both heads, and a central
//! finite-difference checker that only uses forward passes.
//!
//! Batch gradients are reduced in a fixed layout: examples are grouped into
//! consecutive chunks of [`REDUCTION_CHUNK`], each chunk is summed in example
//! order, and chunk sums are added in chunk order. The layout does not depend
//! on how many worker threads compute the chunks, so parallel and sequential
//! runs agree bit for bit.

use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{Error, Result};
use crate::head::{BaselineHeadParams, Classifier, SpaceHeadParams};
use crate::losses::{self, LossBreakdown, LossConfig};
use crate::params::ParamBuffers;
use crate::tensor::Matrix;

pub const REDUCTION_CHUNK: usize = 16;
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// One labeled example, borrowed from a bundle.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub embeddings: &'a Matrix,
    pub mask: &'a [bool],
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub d_projections: Vec<Matrix>,
    pub d_classifier_w: Matrix,
    pub d_classifier_b: Vec<f64>,
}

impl GradientSet {
    pub fn zeros_like(params: &SpaceHeadParams) -> Self {
        GradientSet {
            d_projections: params
                .projections
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
            d_classifier_w: Matrix::zeros(params.classifier_w.rows(), params.classifier_w.cols()),
            d_classifier_b: vec![0.0; params.classifier_b.len()],
        }
    }
}

impl ParamBuffers for GradientSet {
    fn buffers(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.d_projections.iter().map(Matrix::as_slice).collect();
        out.push(self.d_classifier_w.as_slice());
        out.push(&self.d_classifier_b);
        out
    }

    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.d_projections.iter_mut().map(Matrix::as_mut_slice).collect();
        out.push(self.d_classifier_w.as_mut_slice());
        out.push(&mut self.d_classifier_b);
        out
    }
}

/// A head that can be trained by the generic loop: per-example loss and
/// gradient, plus a zero gradient of matching shape.
pub trait TrainableHead: Classifier + ParamBuffers + Clone + Send + Sync {
    type Grad: ParamBuffers + Send;

    fn zero_grad(&self) -> Self::Grad;

    /// Unscaled loss and gradient of a single example.
    fn example_backward(&self, sample: &Sample<'_>, config: &LossConfig) -> Result<(LossBreakdown, Self::Grad)>;

    /// Forward-only loss of a batch (mean over examples), used as the
    /// finite-difference objective.
    fn batch_loss(&self, batch: &[Sample<'_>], config: &LossConfig) -> Result<LossBreakdown>;
}

fn check_label(label: usize, n_classes: usize) -> Result<()> {
    if label >= n_classes {
        return Err(Error::LabelOutOfRange { label, n_classes });
    }
    Ok(())
}

/// `softmax(logits) − onehot(label)`.
fn logit_residual(logits: &[f64], label: usize) -> Vec<f64> {
    let mut r = losses::softmax(logits);
    r[label] -= 1.0;
    r
}

impl TrainableHead for SpaceHeadParams {
    type Grad = GradientSet;

    fn zero_grad(&self) -> GradientSet {
        GradientSet::zeros_like(self)
    }

    fn example_backward(&self, sample: &Sample<'_>, config: &LossConfig) -> Result<(LossBreakdown, GradientSet)> {
        let trace = self.forward(sample.embeddings, sample.mask)?;
        check_label(sample.label, self.classifier_b.len())?;
        let ce = losses::cross_entropy(&trace.logits, sample.label)?;
        let intra = losses::example_intra_space(&trace, sample.mask, config)?;
        let loss = LossBreakdown::combine(ce, intra, config);

        let e = sample.embeddings;
        let m = self.classifier_w.cols() / self.projections.len();
        let n_spaces = self.projections.len() as f64;
        let masked: Vec<usize> = (0..e.rows()).filter(|&j| sample.mask[j]).collect();
        let k = masked.len() as f64;

        let mut grad = GradientSet::zeros_like(self);
        let d_logits = logit_residual(&trace.logits, sample.label);
        for (c, &dl) in d_logits.iter().enumerate() {
            for (g, &f) in grad.d_classifier_w.row_mut(c).iter_mut().zip(&trace.features) {
                *g = dl * f;
            }
        }
        grad.d_classifier_b.copy_from_slice(&d_logits);
        let d_features = self.classifier_w.matvec_transposed(&d_logits)?;

        for (i, c) in trace.attributions.iter().enumerate() {
            let d_centroid = &d_features[i * m..(i + 1) * m];
            // Intra-space term: d(1/(σ²+ε))/dC[j,t] = −2(C[j,t]−μ_t) / (m·K·(σ²+ε)²).
            let intra_coef = if config.intra_weight > 0.0 {
                let var = c.masked_row_variance(sample.mask)?;
                let denom = var + config.variance_epsilon;
                -config.intra_weight / (n_spaces * denom * denom) * 2.0 / (m as f64 * k)
            } else {
                0.0
            };
            let mu = &trace.centroids[i];

            // dZ = dC ⊙ (1 − C²) on masked rows; padding rows carry no gradient.
            let mut dz = Matrix::zeros(masked.len(), m);
            for (row, &j) in masked.iter().enumerate() {
                let c_row = c.row(j);
                for t in 0..m {
                    let mut dc = d_centroid[t] / k;
                    if intra_coef != 0.0 {
                        dc += intra_coef * (c_row[t] - mu[t]);
                    }
                    dz.set(row, t, dc * (1.0 - c_row[t] * c_row[t]));
                }
            }
            let dp = &mut grad.d_projections[i];
            for (row, &j) in masked.iter().enumerate() {
                let e_row = e.row(j);
                let dz_row = dz.row(row);
                for (a, &ea) in e_row.iter().enumerate() {
                    if ea == 0.0 {
                        continue;
                    }
                    for (g, &d) in dp.row_mut(a).iter_mut().zip(dz_row) {
                        *g += ea * d;
                    }
                }
            }
        }
        Ok((loss, grad))
    }

    fn batch_loss(&self, batch: &[Sample<'_>], config: &LossConfig) -> Result<LossBreakdown> {
        let traces = batch
            .iter()
            .map(|s| self.forward(s.embeddings, s.mask))
            .collect::<Result<Vec<_>>>()?;
        let masks: Vec<&[bool]> = batch.iter().map(|s| s.mask).collect();
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        losses::total_loss(&traces, &masks, &labels, config)
    }
}

impl TrainableHead for BaselineHeadParams {
    type Grad = BaselineHeadParams;

    fn zero_grad(&self) -> BaselineHeadParams {
        let mut z = self.clone();
        z.buffers_mut().into_iter().for_each(|b| b.fill(0.0));
        z
    }

    /// The baseline has no concept spaces; its loss is plain cross-entropy.
    fn example_backward(&self, sample: &Sample<'_>, _config: &LossConfig) -> Result<(LossBreakdown, BaselineHeadParams)> {
        let trace = self.forward(sample.embeddings, sample.mask)?;
        check_label(sample.label, self.classifier_b.len())?;
        let ce = losses::cross_entropy(&trace.logits, sample.label)?;
        let mut grad = self.zero_grad();
        let d_logits = logit_residual(&trace.logits, sample.label);
        for (c, &dl) in d_logits.iter().enumerate() {
            for (g, &h) in grad.classifier_w.row_mut(c).iter_mut().zip(&trace.hidden) {
                *g = dl * h;
            }
        }
        grad.classifier_b.copy_from_slice(&d_logits);
        if let Some(gpre) = &mut grad.pre {
            let d_hidden = self.classifier_w.matvec_transposed(&d_logits)?;
            for (r, (&dh, &h)) in d_hidden.iter().zip(&trace.hidden).enumerate() {
                // ReLU passes gradient only where the activation is positive.
                let dpre = if h > 0.0 { dh } else { 0.0 };
                gpre.b[r] = dpre;
                for (g, &x) in gpre.w.row_mut(r).iter_mut().zip(&trace.input) {
                    *g = dpre * x;
                }
            }
        }
        Ok((
            LossBreakdown {
                cross_entropy: ce,
                intra_space: 0.0,
                total: ce,
            },
            grad,
        ))
    }

    fn batch_loss(&self, batch: &[Sample<'_>], _config: &LossConfig) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("loss over an empty batch"));
        }
        let mut ce = 0.0;
        for s in batch {
            ce += losses::cross_entropy(&self.logits(s.embeddings, s.mask)?, s.label)?;
        }
        ce /= batch.len() as f64;
        Ok(LossBreakdown {
            cross_entropy: ce,
            intra_space: 0.0,
            total: ce,
        })
    }
}

struct Partial<G> {
    cross_entropy: f64,
    intra_space: f64,
    grad: G,
}

fn chunk_sum<H: TrainableHead>(params: &H, chunk: &[Sample<'_>], config: &LossConfig) -> Result<Partial<H::Grad>> {
    let mut acc = Partial {
        cross_entropy: 0.0,
        intra_space: 0.0,
        grad: params.zero_grad(),
    };
    for s in chunk {
        let (loss, g) = params.example_backward(s, config)?;
        acc.cross_entropy += loss.cross_entropy;
        acc.intra_space += loss.intra_space;
        acc.grad.add_scaled(&g, 1.0);
    }
    Ok(acc)
}

/// Mean loss and gradient over `batch`.
pub fn backward<H: TrainableHead>(
    params: &H,
    batch: &[Sample<'_>],
    config: &LossConfig,
) -> Result<(LossBreakdown, H::Grad)> {
    backward_with(params, batch, config, None)
}

/// Like [`backward`], optionally computing chunks on `pool`. The result does
/// not depend on whether or how the pool is used.
pub fn backward_with<H: TrainableHead>(
    params: &H,
    batch: &[Sample<'_>],
    config: &LossConfig,
    pool: Option<&ThreadPool>,
) -> Result<(LossBreakdown, H::Grad)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("backward over an empty batch"));
    }
    config.validate()?;
    let partials: Vec<Partial<H::Grad>> = match pool {
        Some(pool) => pool.install(|| {
            batch
                .par_chunks(REDUCTION_CHUNK)
                .map(|chunk| chunk_sum(params, chunk, config))
                .collect::<Result<Vec<_>>>()
        })?,
        None => batch
            .chunks(REDUCTION_CHUNK)
            .map(|chunk| chunk_sum(params, chunk, config))
            .collect::<Result<Vec<_>>>()?,
    };
    let mut ce = 0.0;
    let mut intra = 0.0;
    let mut grad = params.zero_grad();
    for p in &partials {
        ce += p.cross_entropy;
        intra += p.intra_space;
        grad.add_scaled(&p.grad, 1.0);
    }
    let n = batch.len() as f64;
    grad.scale(1.0 / n);
    Ok((LossBreakdown::combine(ce / n, intra / n, config), grad))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Flat index (in buffer order) of the worst parameter.
    pub worst_parameter: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares analytic gradients to `(L(θ+h) − L(θ−h)) / 2h` for every
/// parameter. Relative error is `|a − n| / max(1e-8, |a| + |n|)`.
pub fn finite_difference_check<H: TrainableHead>(
    params: &H,
    batch: &[Sample<'_>],
    config: &LossConfig,
    step: f64,
) -> Result<GradCheckReport> {
    let (_, grad) = backward(params, batch, config)?;
    let analytic = grad.flatten();
    let lens = params.buffer_lens();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = params.clone();
    let mut flat = 0usize;
    for (b, &len) in lens.iter().enumerate() {
        for i in 0..len {
            let original = probe.buffers()[b][i];
            probe.buffers_mut()[b][i] = original + step;
            let plus = probe.batch_loss(batch, config)?.total;
            probe.buffers_mut()[b][i] = original - step;
            let minus = probe.batch_loss(batch, config)?.total;
            probe.buffers_mut()[b][i] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[flat];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if !rel.is_finite() {
                return Err(Error::NonFinite(format!("gradient check at parameter {flat}")));
            }
            if rel > report.max_relative_error || report.checked == 0 {
                report.max_relative_error = rel;
                report.worst_parameter = flat;
                report.analytic = a;
                report.numeric = numeric;
            }
            report.checked += 1;
            flat += 1;
        }
    }
    Ok(report)
}
