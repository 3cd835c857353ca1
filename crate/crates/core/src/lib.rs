//! Concept-space projection heads for classifying frozen contextual
//! embeddings.
//!
//! A space head learns one projection operator per concept space, maps every
//! token embedding through it into the `tanh` cube, pools each space to a
//! centroid and classifies the concatenated centroids with a linear layer.
//! Training combines cross-entropy with an intra-space variance regularizer;
//! gradients are derived by hand and checked against finite differences.

pub mod data;
pub mod error;
pub mod gradients;
pub mod head;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod trainer;

mod codec;

pub use data::{EmbeddingBundle, Example, LabelMap, Manifest, SynthSpec};
pub use error::{Error, Result};
pub use gradients::{GradientSet, Sample, TrainableHead};
pub use head::{AnyHead, BaselineHeadParams, Classifier, ForwardTrace, SpaceHeadConfig, SpaceHeadParams};
pub use losses::{LossBreakdown, LossConfig};
pub use metrics::EvalReport;
pub use optim::{AdamConfig, AdamState};
pub use params::ParamBuffers;
pub use tensor::Matrix;
pub use trainer::{HeadKind, TrainConfig, TrainLog, TrainOutcome, Trainer};
