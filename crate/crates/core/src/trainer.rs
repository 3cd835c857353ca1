//! Epoch loop, evaluation, checkpoints, zero-shot evaluation and centroid
//! export.
//!
//! A run is fully determined by its [`TrainConfig`] and the input bundles:
//! parameters are initialized from `seed`, and the shuffle order of epoch `e`
//! comes from a generator seeded with [`epoch_seed`]`(seed, e)`. That pair is
//! the whole RNG state, so a [`Checkpoint`] taken at any batch boundary
//! resumes onto the identical trajectory.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::ThreadPool;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{apply_label_map, make_batches, EmbeddingBundle, LabelMap};
use crate::error::{Error, Result};
use crate::gradients::{backward_with, Sample, TrainableHead};
use crate::head::{AnyHead, BaselineHeadParams, Classifier, SpaceHeadConfig, SpaceHeadParams};
use crate::losses::{LossBreakdown, LossConfig, DEFAULT_VARIANCE_EPSILON};
use crate::metrics::{evaluate_head, EvalReport};
use crate::optim::{AdamConfig, AdamState, DEFAULT_LR};
use crate::params::ParamBuffers;

pub const DEFAULT_BATCH_SIZE: usize = 8;
pub const DEFAULT_SEED: u64 = 42;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Space,
    /// First-token head with a `d × d` ReLU pre-classifier.
    Baseline,
    /// First-token head, single linear layer.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_accum_steps: usize,
    pub intra_weight: f64,
    pub variance_epsilon: f64,
    pub seed: u64,
    /// Evaluate every this many optimizer updates; 0 evaluates at epoch ends only.
    pub eval_every: u64,
    pub head_kind: HeadKind,
    pub shuffle: bool,
    /// Threads for per-batch gradient chunks. Never changes results.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: DEFAULT_BATCH_SIZE,
            lr: DEFAULT_LR,
            grad_accum_steps: 1,
            intra_weight: 0.0,
            variance_epsilon: DEFAULT_VARIANCE_EPSILON,
            seed: DEFAULT_SEED,
            eval_every: 0,
            head_kind: HeadKind::Space,
            shuffle: true,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::InvalidConfig("workers must be at least 1".into()));
        }
        self.loss_config().validate()?;
        self.adam_config().validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            intra_weight: self.intra_weight,
            variance_epsilon: self.variance_epsilon,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            grad_accum_steps: self.grad_accum_steps,
            ..AdamConfig::default()
        }
    }
}

pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum LogEvent {
    Step {
        step: u64,
        epoch: usize,
        examples: usize,
        updated: bool,
        loss: LossBreakdown,
    },
    Eval {
        step: u64,
        epoch: usize,
        report: EvalReport,
    },
    Epoch {
        epoch: usize,
        step: u64,
        seconds: f64,
    },
}

/// Everything a run reports, in order. Written as JSON lines, one event each.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub events: Vec<LogEvent>,
}

impl TrainLog {
    pub fn step_losses(&self) -> Vec<LossBreakdown> {
        self.events
            .iter()
            .filter_map(|e| match e {
                LogEvent::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn evals(&self) -> Vec<&EvalReport> {
        self.events
            .iter()
            .filter_map(|e| match e {
                LogEvent::Eval { report, .. } => Some(report),
                _ => None,
            })
            .collect()
    }

    /// Events minus wall-clock timings; equal for equal runs.
    pub fn trajectory(&self) -> Vec<&LogEvent> {
        self.events
            .iter()
            .filter(|e| !matches!(e, LogEvent::Epoch { .. }))
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut *w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestHead<H> {
    pub step: u64,
    pub params: H,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState<H> {
    pub params: H,
    pub adam: AdamState,
    pub epoch: usize,
    /// Next batch index within `epoch`.
    pub batch_cursor: usize,
    /// Batches processed so far.
    pub step: u64,
    pub best: Option<BestHead<H>>,
    pub log: TrainLog,
}

pub const CHECKPOINT_FORMAT: &str = "space-head-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<H> {
    pub format: String,
    pub config: TrainConfig,
    pub state: TrainState<H>,
}

impl<H: Serialize + DeserializeOwned> Checkpoint<H> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: Checkpoint<H> = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Malformed(format!("unknown checkpoint format {:?}", ck.format)));
        }
        Ok(ck)
    }
}

/// Reads just the training configuration of a checkpoint, e.g. to learn its head kind.
pub fn peek_checkpoint_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    #[derive(Deserialize)]
    struct Peek {
        format: String,
        config: TrainConfig,
    }
    let p: Peek = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if p.format != CHECKPOINT_FORMAT {
        return Err(Error::Malformed(format!("unknown checkpoint format {:?}", p.format)));
    }
    Ok(p.config)
}

pub struct Trainer<'a, H: TrainableHead> {
    config: TrainConfig,
    samples: Vec<Sample<'a>>,
    eval: Option<&'a EmbeddingBundle>,
    state: TrainState<H>,
    batches: Option<(usize, Vec<Vec<usize>>)>,
    pool: Option<ThreadPool>,
    epoch_started: Option<Instant>,
}

fn check_bundle<H: Classifier>(head: &H, bundle: &EmbeddingBundle, role: &str) -> Result<()> {
    if !bundle.has_labels() {
        return Err(Error::MissingLabels);
    }
    if bundle.is_empty() {
        return Err(Error::EmptyInput("training needs at least one example"));
    }
    if bundle.embed_dim() != head.embed_dim() {
        return Err(Error::InvalidConfig(format!(
            "{role} bundle has d = {}, head expects {}",
            bundle.embed_dim(),
            head.embed_dim()
        )));
    }
    let n_classes = head.n_classes();
    if let Some(&label) = bundle.labels()?.iter().find(|&&l| l >= n_classes) {
        return Err(Error::LabelOutOfRange { label, n_classes });
    }
    Ok(())
}

impl<'a, H: TrainableHead> Trainer<'a, H> {
    pub fn new(
        initial: H,
        train: &'a EmbeddingBundle,
        eval: Option<&'a EmbeddingBundle>,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(config.adam_config(), &initial)?;
        let state = TrainState {
            params: initial,
            adam,
            epoch: 0,
            batch_cursor: 0,
            step: 0,
            best: None,
            log: TrainLog::default(),
        };
        Self::from_state(state, train, eval, config)
    }

    pub fn resume(checkpoint: Checkpoint<H>, train: &'a EmbeddingBundle, eval: Option<&'a EmbeddingBundle>) -> Result<Self> {
        checkpoint.config.validate()?;
        Self::from_state(checkpoint.state, train, eval, checkpoint.config)
    }

    fn from_state(
        state: TrainState<H>,
        train: &'a EmbeddingBundle,
        eval: Option<&'a EmbeddingBundle>,
        config: TrainConfig,
    ) -> Result<Self> {
        check_bundle(&state.params, train, "training")?;
        if let Some(e) = eval {
            check_bundle(&state.params, e, "evaluation")?;
        }
        let pool = if config.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.workers)
                    .build()
                    .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Trainer {
            samples: train.samples()?,
            eval,
            state,
            config,
            batches: None,
            pool,
            epoch_started: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState<H> {
        &self.state
    }

    pub fn params(&self) -> &H {
        &self.state.params
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.config.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint<H> {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            state: self.state.clone(),
        }
    }

    fn epoch_batches(&mut self) -> &[Vec<usize>] {
        let epoch = self.state.epoch;
        if self.batches.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let b = make_batches(
                self.samples.len(),
                self.config.batch_size,
                epoch_seed(self.config.seed, epoch),
                self.config.shuffle,
            );
            self.batches = Some((epoch, b));
        }
        &self.batches.as_ref().expect("just filled").1
    }

    fn run_eval(&mut self) -> Result<()> {
        let Some(bundle) = self.eval else {
            return Ok(());
        };
        let report = evaluate_head(&self.state.params, bundle)?;
        let better = self
            .state
            .best
            .as_ref()
            .is_none_or(|b| report.f1_macro > b.report.f1_macro);
        if better {
            self.state.best = Some(BestHead {
                step: self.state.step,
                params: self.state.params.clone(),
                report: report.clone(),
            });
        }
        self.state.log.events.push(LogEvent::Eval {
            step: self.state.step,
            epoch: self.state.epoch,
            report,
        });
        Ok(())
    }

    fn maybe_periodic_eval(&mut self, updated: bool) -> Result<()> {
        let every = self.config.eval_every;
        if updated && every > 0 && self.state.adam.step.is_multiple_of(every) {
            self.run_eval()?;
        }
        Ok(())
    }

    /// Processes one batch. Returns `false` once all epochs are done.
    pub fn step(&mut self) -> Result<bool> {
        if self.is_finished() {
            return Ok(false);
        }
        if self.epoch_started.is_none() {
            self.epoch_started = Some(Instant::now());
        }
        let cursor = self.state.batch_cursor;
        let (batch, n_batches) = {
            let batches = self.epoch_batches();
            (batches[cursor].clone(), batches.len())
        };
        let samples: Vec<Sample<'a>> = batch.iter().map(|&i| self.samples[i]).collect();
        let loss_config = self.config.loss_config();
        let (loss, grad) = backward_with(&self.state.params, &samples, &loss_config, self.pool.as_ref())?;
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::NonFinite(format!("loss {loss:?} at step {}", self.state.step)));
        }
        let updated = self.state.adam.accumulate(&mut self.state.params, &grad)?;
        self.state.log.events.push(LogEvent::Step {
            step: self.state.step,
            epoch: self.state.epoch,
            examples: samples.len(),
            updated,
            loss,
        });
        self.state.step += 1;
        self.state.batch_cursor += 1;
        self.maybe_periodic_eval(updated)?;

        if self.state.batch_cursor == n_batches {
            let flushed = self.state.adam.flush(&mut self.state.params)?;
            self.maybe_periodic_eval(flushed)?;
            self.run_eval()?;
            let seconds = self.epoch_started.take().map_or(0.0, |t| t.elapsed().as_secs_f64());
            self.state.log.events.push(LogEvent::Epoch {
                epoch: self.state.epoch,
                step: self.state.step,
                seconds,
            });
            self.state.epoch += 1;
            self.state.batch_cursor = 0;
        }
        if !self.state.params.all_finite() {
            return Err(Error::NonFinite("parameters after update".into()));
        }
        Ok(!self.is_finished())
    }

    pub fn run(&mut self) -> Result<()> {
        while self.step()? {}
        Ok(())
    }

    pub fn into_state(self) -> TrainState<H> {
        self.state
    }
}

/// Result of [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub head: AnyHead,
    /// Highest eval macro F1 seen, when an eval bundle was given.
    pub best: Option<(AnyHead, EvalReport)>,
    pub log: TrainLog,
}

pub fn initial_head(head: &SpaceHeadConfig, config: &TrainConfig) -> Result<AnyHead> {
    Ok(match config.head_kind {
        HeadKind::Space => AnyHead::Space(SpaceHeadParams::init(head, config.seed)?),
        HeadKind::Baseline => AnyHead::Baseline(BaselineHeadParams::init(head.embed_dim, head.n_classes, true, config.seed)?),
        HeadKind::Linear => AnyHead::Baseline(BaselineHeadParams::init(head.embed_dim, head.n_classes, false, config.seed)?),
    })
}

fn finish<H: TrainableHead>(state: TrainState<H>, wrap: fn(H) -> AnyHead) -> TrainOutcome {
    TrainOutcome {
        head: wrap(state.params),
        best: state.best.map(|b| (wrap(b.params), b.report)),
        log: state.log,
    }
}

/// Trains the head selected by `config.head_kind` from a fresh seeded init.
pub fn train(
    train_bundle: &EmbeddingBundle,
    eval_bundle: Option<&EmbeddingBundle>,
    head: &SpaceHeadConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    match initial_head(head, config)? {
        AnyHead::Space(p) => {
            let mut t = Trainer::new(p, train_bundle, eval_bundle, config.clone())?;
            t.run()?;
            Ok(finish(t.into_state(), AnyHead::Space))
        }
        AnyHead::Baseline(p) => {
            let mut t = Trainer::new(p, train_bundle, eval_bundle, config.clone())?;
            t.run()?;
            Ok(finish(t.into_state(), AnyHead::Baseline))
        }
    }
}

/// Remaps a foreign bundle into the head's classes and scores it. No
/// parameters change.
pub fn evaluate_zero_shot<C: Classifier + ?Sized>(
    head: &C,
    foreign: &EmbeddingBundle,
    label_map: &LabelMap,
) -> Result<EvalReport> {
    let mapped = apply_label_map(foreign, label_map)?;
    evaluate_head(head, &mapped)
}

/// Mean over examples and spaces of the masked per-space variance.
pub fn mean_projected_variance(params: &SpaceHeadParams, bundle: &EmbeddingBundle) -> Result<f64> {
    if bundle.is_empty() {
        return Err(Error::EmptyInput("variance over an empty bundle"));
    }
    let mut acc = 0.0;
    for ex in bundle.examples() {
        let trace = params.forward(&ex.embeddings, &ex.mask)?;
        let mut per = 0.0;
        for c in &trace.attributions {
            per += c.masked_row_variance(&ex.mask)?;
        }
        acc += per / trace.attributions.len() as f64;
    }
    Ok(acc / bundle.len() as f64)
}

/// CSV of per-example centroids: `example_id,label,s0_m0,…` with
/// `n_spaces · m` coordinate columns. Unlabeled examples get an empty label.
pub fn write_projections<W: Write>(params: &SpaceHeadParams, bundle: &EmbeddingBundle, w: &mut W) -> Result<()> {
    let config = params.config();
    let mut header = String::from("example_id,label");
    for s in 0..config.n_spaces {
        for m in 0..config.latent_dim {
            header.push_str(&format!(",s{s}_m{m}"));
        }
    }
    writeln!(w, "{header}")?;
    for (i, ex) in bundle.examples().iter().enumerate() {
        let trace = params.forward(&ex.embeddings, &ex.mask)?;
        let label = ex.label.map(|l| l.to_string()).unwrap_or_default();
        let mut line = format!("{i},{label}");
        for v in &trace.features {
            line.push_str(&format!(",{v}"));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn export_projections(params: &SpaceHeadParams, bundle: &EmbeddingBundle, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_projections(params, bundle, &mut w)?;
    w.flush()?;
    Ok(())
}
