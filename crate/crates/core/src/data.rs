//! Embedding bundles (`CEB1`), manifests, label maps, batching and the
//! synthetic cluster generator.
//!
//! Bundle layout, all integers little-endian:
//!
//! ```text
//! "CEB1" | u32 version=1 | u32 N | u32 N_s | u32 d | u8 has_labels | u8 reserved×3
//! per example: [u32 label if has_labels] | N_s mask bytes (0/1) | N_s·d f32 row-major
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};
use crate::gradients::Sample;
use crate::tensor::Matrix;

pub const BUNDLE_MAGIC: [u8; 4] = *b"CEB1";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `N_s × d`, widened from the stored `f32`.
    pub embeddings: Matrix,
    pub mask: Vec<bool>,
    pub label: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBundle {
    seq_len: usize,
    embed_dim: usize,
    has_labels: bool,
    examples: Vec<Example>,
}

impl EmbeddingBundle {
    /// Validates shapes, masks and label presence.
    pub fn new(seq_len: usize, embed_dim: usize, examples: Vec<Example>) -> Result<Self> {
        if seq_len == 0 || embed_dim == 0 {
            return Err(Error::InvalidConfig("seq_len and embed_dim must be at least 1".into()));
        }
        let has_labels = examples.first().is_some_and(|e| e.label.is_some());
        for (index, ex) in examples.iter().enumerate() {
            if ex.embeddings.shape() != (seq_len, embed_dim) {
                return Err(Error::Shape {
                    op: "bundle example",
                    left: ex.embeddings.shape(),
                    right: (seq_len, embed_dim),
                });
            }
            if ex.mask.len() != seq_len {
                return Err(Error::Shape {
                    op: "bundle mask",
                    left: (ex.mask.len(), 1),
                    right: (seq_len, 1),
                });
            }
            if !ex.mask.iter().any(|&m| m) {
                return Err(Error::ZeroMaskExample { index });
            }
            if ex.label.is_some() != has_labels {
                return Err(Error::Malformed(format!("example {index} disagrees on label presence")));
            }
            if !ex.embeddings.is_finite() {
                return Err(Error::NonFinite(format!("embeddings of example {index}")));
            }
        }
        Ok(EmbeddingBundle {
            seq_len,
            embed_dim,
            has_labels,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn has_labels(&self) -> bool {
        self.has_labels
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        if !self.has_labels {
            return Err(Error::MissingLabels);
        }
        Ok(self.examples.iter().map(|e| e.label.unwrap_or(0) as usize).collect())
    }

    /// One past the largest label, or 0 when unlabeled.
    pub fn label_count(&self) -> usize {
        self.examples
            .iter()
            .filter_map(|e| e.label)
            .max()
            .map_or(0, |m| m as usize + 1)
    }

    pub fn samples(&self) -> Result<Vec<Sample<'_>>> {
        if !self.has_labels {
            return Err(Error::MissingLabels);
        }
        Ok(self
            .examples
            .iter()
            .map(|e| Sample {
                embeddings: &e.embeddings,
                mask: &e.mask,
                label: e.label.unwrap_or(0) as usize,
            })
            .collect())
    }

    pub fn with_labels(&self, labels: &[u32]) -> Result<EmbeddingBundle> {
        if labels.len() != self.len() {
            return Err(Error::Shape {
                op: "relabel",
                left: (self.len(), 1),
                right: (labels.len(), 1),
            });
        }
        let examples = self
            .examples
            .iter()
            .zip(labels)
            .map(|(e, &l)| Example {
                label: Some(l),
                ..e.clone()
            })
            .collect();
        EmbeddingBundle::new(self.seq_len, self.embed_dim, examples)
    }
}

pub fn write_bundle_to<W: Write>(bundle: &EmbeddingBundle, w: &mut W) -> Result<()> {
    w.write_all(&BUNDLE_MAGIC)?;
    codec::write_u32(w, BUNDLE_VERSION)?;
    codec::write_u32(w, codec::to_u32(bundle.len(), "N")?)?;
    codec::write_u32(w, codec::to_u32(bundle.seq_len, "seq_len")?)?;
    codec::write_u32(w, codec::to_u32(bundle.embed_dim, "embed_dim")?)?;
    w.write_all(&[bundle.has_labels as u8, 0, 0, 0])?;
    for ex in &bundle.examples {
        if let Some(label) = ex.label {
            codec::write_u32(w, label)?;
        }
        let mask: Vec<u8> = ex.mask.iter().map(|&m| m as u8).collect();
        w.write_all(&mask)?;
        codec::write_f32s(w, ex.embeddings.as_slice())?;
    }
    Ok(())
}

pub fn read_bundle_from<R: Read>(r: &mut R) -> Result<EmbeddingBundle> {
    codec::read_magic(r, BUNDLE_MAGIC)?;
    codec::read_version(r, BUNDLE_VERSION)?;
    let n = codec::read_u32(r, "N")? as usize;
    let seq_len = codec::read_u32(r, "seq_len")? as usize;
    let embed_dim = codec::read_u32(r, "embed_dim")? as usize;
    let mut flags = [0u8; 4];
    codec::read_exact_or(r, &mut flags, "header flags")?;
    let has_labels = match flags[0] {
        0 => false,
        1 => true,
        other => return Err(Error::Malformed(format!("has_labels flag {other}"))),
    };
    if seq_len == 0 || embed_dim == 0 {
        return Err(Error::Malformed("seq_len and embed_dim must be at least 1".into()));
    }
    let mut examples = Vec::with_capacity(n.min(1 << 16));
    let mut mask_bytes = vec![0u8; seq_len];
    for index in 0..n {
        let label = if has_labels {
            Some(codec::read_u32(r, &format!("label of example {index}"))?)
        } else {
            None
        };
        codec::read_exact_or(r, &mut mask_bytes, &format!("mask of example {index}"))?;
        let mask = mask_bytes
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Malformed(format!("mask byte {other} in example {index}"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        if !mask.iter().any(|&m| m) {
            return Err(Error::ZeroMaskExample { index });
        }
        let values = codec::read_f32s(r, seq_len * embed_dim, &format!("embeddings of example {index}"))?;
        examples.push(Example {
            embeddings: Matrix::from_vec(seq_len, embed_dim, values)?,
            mask,
            label,
        });
    }
    codec::expect_eof(r)?;
    let mut bundle = EmbeddingBundle::new(seq_len, embed_dim, examples)?;
    bundle.has_labels = has_labels;
    Ok(bundle)
}

pub fn write_bundle(bundle: &EmbeddingBundle, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_bundle_to(bundle, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<EmbeddingBundle> {
    read_bundle_from(&mut BufReader::new(File::open(path)?))
}

/// JSON sidecar describing a bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub classes: Vec<String>,
    pub bundle: String,
    pub base_model: String,
    pub pooling: String,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

/// Source-dataset label id to model class id. JSON form: `{"map": {"0": 0, ...}}`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub map: BTreeMap<u32, u32>,
}

impl LabelMap {
    pub fn identity(n_classes: u32) -> Self {
        LabelMap {
            map: (0..n_classes).map(|c| (c, c)).collect(),
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (u32, u32)>) -> Self {
        LabelMap {
            map: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, label: u32) -> Result<u32> {
        self.map.get(&label).copied().ok_or(Error::UnmappedLabel { label })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }
}

/// Remaps every label; embeddings and masks are untouched.
pub fn apply_label_map(bundle: &EmbeddingBundle, map: &LabelMap) -> Result<EmbeddingBundle> {
    if !bundle.has_labels() {
        return Err(Error::MissingLabels);
    }
    let labels = bundle
        .examples
        .iter()
        .map(|e| map.get(e.label.unwrap_or(0)))
        .collect::<Result<Vec<u32>>>()?;
    bundle.with_labels(&labels)
}

/// Index batches covering `0..n` exactly once. With `shuffle` the order is a
/// seeded permutation; the last batch may be short.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    /// One `d`-vector per class.
    pub centers: Vec<Vec<f64>>,
    pub stddev: f64,
    pub n: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// Class `c` centered at `±separation · e_{c/2}`: even classes on the
    /// positive side, odd classes on the negative side.
    pub fn axis_clusters(
        n_classes: usize,
        n: usize,
        seq_len: usize,
        dim: usize,
        separation: f64,
        stddev: f64,
        seed: u64,
    ) -> Result<Self> {
        if n_classes == 0 || dim < n_classes.div_ceil(2) {
            return Err(Error::InvalidConfig(format!(
                "{n_classes} axis clusters need dim >= {}",
                n_classes.div_ceil(2)
            )));
        }
        let centers = (0..n_classes)
            .map(|c| {
                let mut v = vec![0.0; dim];
                v[c / 2] = if c % 2 == 0 { separation } else { -separation };
                v
            })
            .collect();
        let spec = SynthSpec {
            n_classes,
            centers,
            stddev,
            n,
            seq_len,
            dim,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.seq_len == 0 || self.dim == 0 {
            return Err(Error::InvalidConfig("n_classes, seq_len and dim must be at least 1".into()));
        }
        if self.centers.len() != self.n_classes || self.centers.iter().any(|c| c.len() != self.dim) {
            return Err(Error::InvalidConfig("need one d-dimensional center per class".into()));
        }
        if !(self.stddev >= 0.0 && self.stddev.is_finite()) {
            return Err(Error::InvalidConfig(format!("stddev must be finite and >= 0, got {}", self.stddev)));
        }
        Ok(())
    }
}

/// Gaussian token clouds around per-class centers. Labels are assigned
/// round-robin (`i mod n_classes`), masks are full, and values are rounded
/// to `f32` so an in-memory bundle equals its file image. Noise is drawn in
/// the same order whatever the centers are.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<EmbeddingBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let examples = (0..spec.n)
        .map(|i| {
            let class = i % spec.n_classes;
            let center = &spec.centers[class];
            let mut data = Vec::with_capacity(spec.seq_len * spec.dim);
            for _ in 0..spec.seq_len {
                for &c in center {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push((c + spec.stddev * z) as f32 as f64);
                }
            }
            Example {
                embeddings: Matrix::from_vec(spec.seq_len, spec.dim, data).expect("sized by construction"),
                mask: vec![true; spec.seq_len],
                label: Some(class as u32),
            }
        })
        .collect();
    EmbeddingBundle::new(spec.seq_len, spec.dim, examples)
}
