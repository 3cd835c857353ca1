//! Classification heads over a frozen encoder's token embeddings.
//!
//! The space head projects the token matrix `E` (`N_s × d`) through one
//! concept operator `P_i` (`d × m`) per space, squashes with `tanh`, takes the
//! masked centroid of each projected matrix and feeds the concatenated
//! centroids to a single linear layer:
//!
//! ```text
//! C_i    = tanh(E · P_i)
//! k_i    = mean of C_i over masked rows
//! logits = W · [k_1 | … | k_n] + b
//! ```
//!
//! Every `C_i` entry and every centroid therefore lives in the open cube
//! `(-1, 1)^m`.
//!
//! The latent size used for the benchmark-scale head follows from its
//! trainable-parameter count: `197122 = 2·768·128 + 2·(2·128) + 2`, so
//! `m = 128` with two spaces and two classes. The visualizable head has
//! `4622 = 2·768·3 + 2·(2·3) + 2`, i.e. `m = 3`.
//!
//! The baseline head is the usual transformer classification head: first
//! token, a `d × d` pre-classifier with ReLU, then a linear classifier
//! (`592130` parameters at `d = 768`, two classes). Without the pre-layer it
//! is a single linear map (`1538` parameters).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};
use crate::params::ParamBuffers;
use crate::tensor::{Matrix, BELOW_ONE};

pub const SPACE_MODEL_MAGIC: [u8; 4] = *b"SMH1";
pub const BASELINE_MODEL_MAGIC: [u8; 4] = *b"SBH1";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceHeadConfig {
    pub embed_dim: usize,
    pub latent_dim: usize,
    pub n_spaces: usize,
    pub n_classes: usize,
}

impl SpaceHeadConfig {
    /// One concept space per class.
    pub fn new(embed_dim: usize, latent_dim: usize, n_classes: usize) -> Self {
        SpaceHeadConfig {
            embed_dim,
            latent_dim,
            n_spaces: n_classes,
            n_classes,
        }
    }

    pub fn with_spaces(mut self, n_spaces: usize) -> Self {
        self.n_spaces = n_spaces;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("embed_dim", self.embed_dim),
            ("latent_dim", self.latent_dim),
            ("n_spaces", self.n_spaces),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.n_spaces * self.latent_dim
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count(self)
    }
}

pub fn parameter_count(config: &SpaceHeadConfig) -> usize {
    let SpaceHeadConfig {
        embed_dim: d,
        latent_dim: m,
        n_spaces: s,
        n_classes: c,
    } = *config;
    s * d * m + c * s * m + c
}

pub fn baseline_parameter_count(embed_dim: usize, n_classes: usize, pre_layer: bool) -> usize {
    let pre = if pre_layer {
        embed_dim * embed_dim + embed_dim
    } else {
        0
    };
    pre + n_classes * embed_dim + n_classes
}

/// Anything that maps one example's token matrix to class logits.
pub trait Classifier {
    fn embed_dim(&self) -> usize;
    fn n_classes(&self) -> usize;
    fn logits(&self, embeddings: &Matrix, mask: &[bool]) -> Result<Vec<f64>>;
}

fn xavier_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceHeadParams {
    pub projections: Vec<Matrix>,
    pub classifier_w: Matrix,
    pub classifier_b: Vec<f64>,
}

/// Cached intermediates of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `C_i`, one `N_s × m` matrix per space.
    pub attributions: Vec<Matrix>,
    pub centroids: Vec<Vec<f64>>,
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
}

impl SpaceHeadParams {
    /// Projections and classifier weights uniform in `±√(6/(fan_in+fan_out))`,
    /// bias zero.
    pub fn init(config: &SpaceHeadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let m = config.latent_dim;
        let projections = (0..config.n_spaces)
            .map(|_| xavier_uniform(&mut rng, d, m, d, m))
            .collect();
        let features = config.feature_dim();
        let classifier_w = xavier_uniform(&mut rng, config.n_classes, features, features, config.n_classes);
        Ok(SpaceHeadParams {
            projections,
            classifier_w,
            classifier_b: vec![0.0; config.n_classes],
        })
    }

    pub fn zeros(config: &SpaceHeadConfig) -> Self {
        SpaceHeadParams {
            projections: vec![Matrix::zeros(config.embed_dim, config.latent_dim); config.n_spaces],
            classifier_w: Matrix::zeros(config.n_classes, config.feature_dim()),
            classifier_b: vec![0.0; config.n_classes],
        }
    }

    pub fn config(&self) -> SpaceHeadConfig {
        let (d, m) = self.projections.first().map_or((0, 0), Matrix::shape);
        SpaceHeadConfig {
            embed_dim: d,
            latent_dim: m,
            n_spaces: self.projections.len(),
            n_classes: self.classifier_b.len(),
        }
    }

    /// Checks that every tensor agrees with the shape implied by the first projection.
    pub fn validate(&self) -> Result<()> {
        let config = self.config();
        config.validate()?;
        let (d, m) = (config.embed_dim, config.latent_dim);
        for p in &self.projections {
            if p.shape() != (d, m) {
                return Err(Error::Shape {
                    op: "projection",
                    left: p.shape(),
                    right: (d, m),
                });
            }
        }
        let w_shape = (config.n_classes, config.feature_dim());
        if self.classifier_w.shape() != w_shape {
            return Err(Error::Shape {
                op: "classifier_w",
                left: self.classifier_w.shape(),
                right: w_shape,
            });
        }
        if !self.all_finite() {
            return Err(Error::NonFinite("space head parameters".into()));
        }
        Ok(())
    }

    pub fn forward(&self, embeddings: &Matrix, mask: &[bool]) -> Result<ForwardTrace> {
        let d = self.config().embed_dim;
        if embeddings.cols() != d {
            return Err(Error::Shape {
                op: "forward",
                left: embeddings.shape(),
                right: (embeddings.rows(), d),
            });
        }
        embeddings.check_mask(mask)?;
        let mut attributions = Vec::with_capacity(self.projections.len());
        let mut centroids = Vec::with_capacity(self.projections.len());
        for p in &self.projections {
            let c = embeddings.matmul(p)?.tanh_elementwise();
            // the mean of values in (-1, 1) can still round onto ±1
            let k: Vec<f64> = c
                .masked_row_mean(mask)?
                .into_iter()
                .map(|v| v.clamp(-BELOW_ONE, BELOW_ONE))
                .collect();
            centroids.push(k);
            attributions.push(c);
        }
        let features = centroids.concat();
        let mut logits = self.classifier_w.matvec(&features)?;
        for (l, b) in logits.iter_mut().zip(&self.classifier_b) {
            *l += b;
        }
        Ok(ForwardTrace {
            attributions,
            centroids,
            features,
            logits,
        })
    }
}

impl Classifier for SpaceHeadParams {
    fn embed_dim(&self) -> usize {
        self.config().embed_dim
    }

    fn n_classes(&self) -> usize {
        self.classifier_b.len()
    }

    fn logits(&self, embeddings: &Matrix, mask: &[bool]) -> Result<Vec<f64>> {
        Ok(self.forward(embeddings, mask)?.logits)
    }
}

impl ParamBuffers for SpaceHeadParams {
    fn buffers(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.projections.iter().map(Matrix::as_slice).collect();
        out.push(self.classifier_w.as_slice());
        out.push(&self.classifier_b);
        out
    }

    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.projections.iter_mut().map(Matrix::as_mut_slice).collect();
        out.push(self.classifier_w.as_mut_slice());
        out.push(&mut self.classifier_b);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreLayer {
    pub w: Matrix,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineHeadParams {
    pub pre: Option<PreLayer>,
    pub classifier_w: Matrix,
    pub classifier_b: Vec<f64>,
}

/// Intermediates of a baseline forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineTrace {
    pub input: Vec<f64>,
    /// Post-ReLU activations; equals `input` when there is no pre-layer.
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

impl BaselineHeadParams {
    pub fn init(embed_dim: usize, n_classes: usize, pre_layer: bool, seed: u64) -> Result<Self> {
        if embed_dim == 0 || n_classes == 0 {
            return Err(Error::InvalidConfig("embed_dim and n_classes must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pre = pre_layer.then(|| PreLayer {
            w: xavier_uniform(&mut rng, embed_dim, embed_dim, embed_dim, embed_dim),
            b: vec![0.0; embed_dim],
        });
        let classifier_w = xavier_uniform(&mut rng, n_classes, embed_dim, embed_dim, n_classes);
        Ok(BaselineHeadParams {
            pre,
            classifier_w,
            classifier_b: vec![0.0; n_classes],
        })
    }

    pub fn has_pre_layer(&self) -> bool {
        self.pre.is_some()
    }

    pub fn parameter_count(&self) -> usize {
        baseline_parameter_count(self.embed_dim(), self.n_classes(), self.has_pre_layer())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.embed_dim();
        if d == 0 || self.n_classes() == 0 {
            return Err(Error::InvalidConfig("empty baseline head".into()));
        }
        if self.classifier_w.rows() != self.n_classes() {
            return Err(Error::Shape {
                op: "classifier_w",
                left: self.classifier_w.shape(),
                right: (self.n_classes(), d),
            });
        }
        if let Some(pre) = &self.pre {
            if pre.w.shape() != (d, d) || pre.b.len() != d {
                return Err(Error::Shape {
                    op: "pre_w",
                    left: pre.w.shape(),
                    right: (d, d),
                });
            }
        }
        if !self.all_finite() {
            return Err(Error::NonFinite("baseline head parameters".into()));
        }
        Ok(())
    }

    /// First-token pooling, optional ReLU pre-layer, linear classifier.
    pub fn forward(&self, embeddings: &Matrix, mask: &[bool]) -> Result<BaselineTrace> {
        let d = self.embed_dim();
        if embeddings.cols() != d || embeddings.rows() == 0 {
            return Err(Error::Shape {
                op: "baseline_forward",
                left: embeddings.shape(),
                right: (embeddings.rows().max(1), d),
            });
        }
        embeddings.check_mask(mask)?;
        let input = embeddings.row(0).to_vec();
        let hidden = match &self.pre {
            Some(pre) => {
                let mut h = pre.w.matvec(&input)?;
                for (x, b) in h.iter_mut().zip(&pre.b) {
                    *x = (*x + b).max(0.0);
                }
                h
            }
            None => input.clone(),
        };
        let mut logits = self.classifier_w.matvec(&hidden)?;
        for (l, b) in logits.iter_mut().zip(&self.classifier_b) {
            *l += b;
        }
        Ok(BaselineTrace { input, hidden, logits })
    }
}

impl Classifier for BaselineHeadParams {
    fn embed_dim(&self) -> usize {
        self.classifier_w.cols()
    }

    fn n_classes(&self) -> usize {
        self.classifier_b.len()
    }

    fn logits(&self, embeddings: &Matrix, mask: &[bool]) -> Result<Vec<f64>> {
        Ok(self.forward(embeddings, mask)?.logits)
    }
}

impl ParamBuffers for BaselineHeadParams {
    fn buffers(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(4);
        if let Some(pre) = &self.pre {
            out.push(pre.w.as_slice());
            out.push(&pre.b);
        }
        out.push(self.classifier_w.as_slice());
        out.push(&self.classifier_b);
        out
    }

    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(4);
        if let Some(pre) = &mut self.pre {
            out.push(pre.w.as_mut_slice());
            out.push(&mut pre.b);
        }
        out.push(self.classifier_w.as_mut_slice());
        out.push(&mut self.classifier_b);
        out
    }
}

/// Either kind of head, as found in a model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AnyHead {
    Space(SpaceHeadParams),
    Baseline(BaselineHeadParams),
}

impl AnyHead {
    pub fn parameter_count(&self) -> usize {
        match self {
            AnyHead::Space(p) => p.scalar_count(),
            AnyHead::Baseline(p) => p.scalar_count(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        match self {
            AnyHead::Space(p) => save_model(p, path),
            AnyHead::Baseline(p) => save_baseline(p, path),
        }
    }
}

impl Classifier for AnyHead {
    fn embed_dim(&self) -> usize {
        match self {
            AnyHead::Space(p) => p.embed_dim(),
            AnyHead::Baseline(p) => p.embed_dim(),
        }
    }

    fn n_classes(&self) -> usize {
        match self {
            AnyHead::Space(p) => p.n_classes(),
            AnyHead::Baseline(p) => p.n_classes(),
        }
    }

    fn logits(&self, embeddings: &Matrix, mask: &[bool]) -> Result<Vec<f64>> {
        match self {
            AnyHead::Space(p) => p.logits(embeddings, mask),
            AnyHead::Baseline(p) => p.logits(embeddings, mask),
        }
    }
}

/// Writes an `SMH1` model file:
/// `"SMH1" | u32 version | u32 d | u32 m | u32 n_spaces | u32 n_classes`
/// followed by `f32` LE projections, classifier weights and bias.
pub fn write_model<W: Write>(params: &SpaceHeadParams, w: &mut W) -> Result<()> {
    params.validate()?;
    let c = params.config();
    w.write_all(&SPACE_MODEL_MAGIC)?;
    codec::write_u32(w, MODEL_VERSION)?;
    for (name, v) in [
        ("embed_dim", c.embed_dim),
        ("latent_dim", c.latent_dim),
        ("n_spaces", c.n_spaces),
        ("n_classes", c.n_classes),
    ] {
        codec::write_u32(w, codec::to_u32(v, name)?)?;
    }
    for buf in params.buffers() {
        codec::write_f32s(w, buf)?;
    }
    Ok(())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<SpaceHeadParams> {
    codec::read_magic(r, SPACE_MODEL_MAGIC)?;
    read_model_body(r)
}

fn read_model_body<R: Read>(r: &mut R) -> Result<SpaceHeadParams> {
    codec::read_version(r, MODEL_VERSION)?;
    let config = SpaceHeadConfig {
        embed_dim: codec::read_u32(r, "embed_dim")? as usize,
        latent_dim: codec::read_u32(r, "latent_dim")? as usize,
        n_spaces: codec::read_u32(r, "n_spaces")? as usize,
        n_classes: codec::read_u32(r, "n_classes")? as usize,
    };
    config.validate()?;
    let mut params = SpaceHeadParams::zeros(&config);
    for (i, buf) in params.buffers_mut().into_iter().enumerate() {
        let values = codec::read_f32s(r, buf.len(), &format!("parameter block {i}"))?;
        buf.copy_from_slice(&values);
    }
    codec::expect_eof(r)?;
    Ok(params)
}

pub fn save_model(params: &SpaceHeadParams, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(SpaceHeadParams, SpaceHeadConfig)> {
    let mut r = BufReader::new(File::open(path)?);
    let params = read_model(&mut r)?;
    let config = params.config();
    Ok((params, config))
}

/// Writes an `SBH1` baseline file:
/// `"SBH1" | u32 version | u32 d | u32 n_classes | u32 has_pre_layer`
/// followed by `f32` LE `[pre_w, pre_b,] classifier_w, classifier_b`.
pub fn write_baseline<W: Write>(params: &BaselineHeadParams, w: &mut W) -> Result<()> {
    params.validate()?;
    w.write_all(&BASELINE_MODEL_MAGIC)?;
    codec::write_u32(w, MODEL_VERSION)?;
    codec::write_u32(w, codec::to_u32(params.embed_dim(), "embed_dim")?)?;
    codec::write_u32(w, codec::to_u32(params.n_classes(), "n_classes")?)?;
    codec::write_u32(w, params.has_pre_layer() as u32)?;
    for buf in params.buffers() {
        codec::write_f32s(w, buf)?;
    }
    Ok(())
}

fn read_baseline_body<R: Read>(r: &mut R) -> Result<BaselineHeadParams> {
    codec::read_version(r, MODEL_VERSION)?;
    let d = codec::read_u32(r, "embed_dim")? as usize;
    let c = codec::read_u32(r, "n_classes")? as usize;
    let pre_layer = match codec::read_u32(r, "has_pre_layer")? {
        0 => false,
        1 => true,
        other => return Err(Error::Malformed(format!("has_pre_layer flag {other}"))),
    };
    if d == 0 || c == 0 {
        return Err(Error::InvalidConfig("embed_dim and n_classes must be at least 1".into()));
    }
    let mut params = BaselineHeadParams {
        pre: pre_layer.then(|| PreLayer {
            w: Matrix::zeros(d, d),
            b: vec![0.0; d],
        }),
        classifier_w: Matrix::zeros(c, d),
        classifier_b: vec![0.0; c],
    };
    for (i, buf) in params.buffers_mut().into_iter().enumerate() {
        let values = codec::read_f32s(r, buf.len(), &format!("parameter block {i}"))?;
        buf.copy_from_slice(&values);
    }
    codec::expect_eof(r)?;
    Ok(params)
}

pub fn save_baseline(params: &BaselineHeadParams, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_baseline(params, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads either model format, dispatching on the magic.
pub fn read_any<R: Read>(r: &mut R) -> Result<AnyHead> {
    let mut magic = [0u8; 4];
    codec::read_exact_or(r, &mut magic, "magic")?;
    match magic {
        SPACE_MODEL_MAGIC => Ok(AnyHead::Space(read_model_body(r)?)),
        BASELINE_MODEL_MAGIC => Ok(AnyHead::Baseline(read_baseline_body(r)?)),
        found => Err(Error::BadMagic {
            expected: SPACE_MODEL_MAGIC,
            found,
        }),
    }
}

pub fn load_any(path: impl AsRef<Path>) -> Result<AnyHead> {
    read_any(&mut BufReader::new(File::open(path)?))
}
