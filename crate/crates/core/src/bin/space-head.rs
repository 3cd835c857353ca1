//! `space-head`: train, evaluate and inspect concept-space classification heads.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
//! failure (non-finite loss, failed gradient check).

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use space_head::data::{generate_synthetic, read_bundle, write_bundle, SynthSpec};
use space_head::gradients::{finite_difference_check, Sample, TrainableHead, DEFAULT_FD_STEP};
use space_head::head::{load_any, BaselineHeadParams};
use space_head::losses::DEFAULT_VARIANCE_EPSILON;
use space_head::metrics::evaluate_head;
use space_head::optim::DEFAULT_LR;
use space_head::trainer::{
    evaluate_zero_shot, export_projections, initial_head, peek_checkpoint_config, write_projections,
    Checkpoint, DEFAULT_BATCH_SIZE, DEFAULT_SEED,
};
use space_head::{
    AnyHead, Classifier, EmbeddingBundle, Error, EvalReport, HeadKind, LabelMap, LossConfig, Manifest, Matrix,
    SpaceHeadConfig, SpaceHeadParams, TrainConfig, Trainer,
};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "space-head", version, about = "Concept-space classification heads over frozen token embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a head on a labeled bundle.
    Train(Box<TrainArgs>),
    /// Score a trained head on a labeled bundle.
    Eval(EvalArgs),
    /// Score a head on a bundle from another label set, remapped through `--label-map`.
    ZeroShot(ZeroShotArgs),
    /// Export per-example centroids as CSV.
    Project(ProjectArgs),
    /// Generate a synthetic clustered bundle.
    Synth(SynthArgs),
    /// Print the configuration of a model or bundle file.
    Inspect(InspectArgs),
    /// Compare analytic and finite-difference gradients on random data.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum HeadArg {
    Space,
    Baseline,
    Linear,
}

impl From<HeadArg> for HeadKind {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Space => HeadKind::Space,
            HeadArg::Baseline => HeadKind::Baseline,
            HeadArg::Linear => HeadKind::Linear,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_name = "PATH")]
    embeddings: PathBuf,
    /// Held-out bundle scored at every epoch end.
    #[arg(long, value_name = "PATH")]
    eval: Option<PathBuf>,
    /// Where the final head is written.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Where the head with the best eval macro F1 is written.
    #[arg(long, value_name = "PATH", requires = "eval")]
    best_out: Option<PathBuf>,
    /// JSON-lines training log.
    #[arg(long, value_name = "PATH")]
    log: Option<PathBuf>,
    /// Checkpoint rewritten at every epoch end.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Continue from a checkpoint; its stored configuration is used.
    #[arg(long, value_name = "PATH", conflicts_with_all = [
        "latent_dim", "spaces", "classes", "intra_weight", "variance_epsilon", "lr",
        "epochs", "batch_size", "grad_accum", "seed", "head", "eval_every", "no_shuffle",
    ])]
    resume: Option<PathBuf>,
    #[arg(long, value_name = "M")]
    latent_dim: Option<usize>,
    /// Number of concept spaces; defaults to the number of classes.
    #[arg(long, value_name = "K")]
    spaces: Option<usize>,
    /// Defaults to the largest training label plus one.
    #[arg(long, value_name = "C")]
    classes: Option<usize>,
    #[arg(long, value_name = "F")]
    intra_weight: Option<f64>,
    #[arg(long, value_name = "F")]
    variance_epsilon: Option<f64>,
    #[arg(long, value_name = "F")]
    lr: Option<f64>,
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    #[arg(long, value_name = "N")]
    grad_accum: Option<usize>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    /// Also evaluate every N optimizer updates.
    #[arg(long, value_name = "N")]
    eval_every: Option<u64>,
    /// Keep the bundle order instead of reshuffling each epoch.
    #[arg(long)]
    no_shuffle: bool,
    /// Threads for gradient computation. Results do not depend on it.
    #[arg(long, value_name = "N", default_value_t = 1)]
    workers: usize,
    /// Print the final eval report as JSON.
    #[arg(long)]
    json: bool,
}

const DEFAULT_LATENT_DIM: usize = 128;

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    #[arg(long, value_name = "PATH")]
    embeddings: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct ZeroShotArgs {
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    #[arg(long, value_name = "PATH")]
    embeddings: PathBuf,
    /// JSON `{"map": {"src": dst}}`.
    #[arg(long, value_name = "PATH")]
    label_map: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct ProjectArgs {
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    #[arg(long, value_name = "PATH")]
    embeddings: PathBuf,
    /// CSV destination; standard output when omitted.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_name = "C", default_value_t = 2)]
    classes: usize,
    #[arg(long, value_name = "N", default_value_t = 512)]
    n: usize,
    #[arg(long, value_name = "N", default_value_t = 8)]
    seq_len: usize,
    #[arg(long, value_name = "D", default_value_t = 16)]
    dim: usize,
    /// Distance of each class center from the origin.
    #[arg(long, value_name = "F", default_value_t = 10.0)]
    separation: f64,
    #[arg(long, value_name = "F", default_value_t = 0.1)]
    stddev: f64,
    #[arg(long, value_name = "N", default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Also write a JSON manifest for the bundle.
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("input").required(true).multiple(true).args(["model", "embeddings"])))]
struct InspectArgs {
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_name = "D", default_value_t = 5)]
    dim: usize,
    #[arg(long, value_name = "M", default_value_t = 3)]
    latent_dim: usize,
    #[arg(long, value_name = "K", default_value_t = 2)]
    spaces: usize,
    #[arg(long, value_name = "C", default_value_t = 2)]
    classes: usize,
    #[arg(long, value_name = "N", default_value_t = 4)]
    seq_len: usize,
    #[arg(long, value_name = "N", default_value_t = 4)]
    batch_size: usize,
    /// Kept nonzero by default so the regularizer's gradient is checked too.
    #[arg(long, value_name = "F", default_value_t = 0.1)]
    intra_weight: f64,
    #[arg(long, value_name = "N", default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn numeric(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite(_) => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn context(what: &Path) -> impl FnOnce(Error) -> Failure + '_ {
    move |e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", what.display(), f.message);
        f
    }
}

fn header(command: &str, config: serde_json::Value) {
    eprintln!("{}", json!({ "command": command, "config": config }));
}

/// Human-readable table: aggregate metrics, then one row per class.
fn format_report(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<10} {:>8}", "metric", "value");
    for (name, v) in [
        ("accuracy", report.accuracy),
        ("f1_macro", report.f1_macro),
        ("precision", report.precision_macro),
        ("recall", report.recall_macro),
    ] {
        let _ = writeln!(s, "{name:<10} {v:>8.4}");
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<6} {:>9} {:>8} {:>8} {:>8}", "class", "precision", "recall", "f1", "support");
    for c in &report.per_class {
        let _ = writeln!(
            s,
            "{:<6} {:>9.4} {:>8.4} {:>8.4} {:>8}",
            c.class, c.precision, c.recall, c.f1, c.support
        );
    }
    s
}

fn print_report(report: &EvalReport, as_json: bool) -> CliResult {
    let text = if as_json {
        let mut t = serde_json::to_string_pretty(report).map_err(Error::from)?;
        t.push('\n');
        t
    } else {
        format_report(report)
    };
    std::io::stdout().write_all(text.as_bytes()).map_err(Error::from)?;
    Ok(())
}

fn load_bundle(path: &Path) -> CliResult<EmbeddingBundle> {
    read_bundle(path).map_err(context(path))
}

fn load_head(path: &Path) -> CliResult<AnyHead> {
    load_any(path).map_err(context(path))
}

fn train_config(args: &TrainArgs) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        epochs: args.epochs.unwrap_or(d.epochs),
        batch_size: args.batch_size.unwrap_or(DEFAULT_BATCH_SIZE),
        lr: args.lr.unwrap_or(DEFAULT_LR),
        grad_accum_steps: args.grad_accum.unwrap_or(d.grad_accum_steps),
        intra_weight: args.intra_weight.unwrap_or(0.0),
        variance_epsilon: args.variance_epsilon.unwrap_or(DEFAULT_VARIANCE_EPSILON),
        seed: args.seed.unwrap_or(DEFAULT_SEED),
        eval_every: args.eval_every.unwrap_or(0),
        head_kind: args.head.map_or(HeadKind::Space, Into::into),
        shuffle: !args.no_shuffle,
        workers: args.workers,
    }
}

struct TrainOutputs<'p> {
    out: &'p Path,
    best_out: Option<&'p Path>,
    log: Option<&'p Path>,
    checkpoint: Option<&'p Path>,
}

/// Runs a trainer to completion, checkpointing at epoch ends, and writes
/// the requested artifacts. Returns the final eval report if any.
fn drive<H>(mut t: Trainer<'_, H>, wrap: fn(H) -> AnyHead, outputs: &TrainOutputs<'_>) -> CliResult<Option<EvalReport>>
where
    H: TrainableHead + Serialize + DeserializeOwned,
{
    let mut epoch = t.state().epoch;
    loop {
        let more = t.step()?;
        if t.state().epoch != epoch {
            epoch = t.state().epoch;
            if let Some(path) = outputs.checkpoint {
                t.checkpoint().save(path).map_err(context(path))?;
            }
            if let Some(report) = t.state().log.evals().last() {
                eprintln!(
                    "epoch {epoch}: step {} accuracy {:.4} f1_macro {:.4}",
                    t.state().step,
                    report.accuracy,
                    report.f1_macro
                );
            } else {
                eprintln!("epoch {epoch}: step {}", t.state().step);
            }
        }
        if !more {
            break;
        }
    }
    let state = t.into_state();
    if let Some(path) = outputs.log {
        state.log.save_jsonl(path).map_err(context(path))?;
    }
    let last = state.log.evals().last().map(|r| (*r).clone());
    if let (Some(path), Some(best)) = (outputs.best_out, state.best) {
        wrap(best.params).save(path).map_err(context(path))?;
    }
    let out = outputs.out;
    wrap(state.params).save(out).map_err(context(out))?;
    Ok(last)
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let train_bundle = load_bundle(&args.embeddings)?;
    let eval_bundle = args.eval.as_deref().map(load_bundle).transpose()?;
    let outputs = TrainOutputs {
        out: &args.out,
        best_out: args.best_out.as_deref(),
        log: args.log.as_deref(),
        checkpoint: args.checkpoint.as_deref(),
    };

    let report = if let Some(path) = &args.resume {
        let mut config = peek_checkpoint_config(path).map_err(context(path))?;
        config.workers = args.workers;
        config.validate().map_err(|e| Failure::usage(e.to_string()))?;
        header("train", json!({ "resume": path, "train": config }));
        match config.head_kind {
            HeadKind::Space => {
                let mut ck: Checkpoint<SpaceHeadParams> = Checkpoint::load(path).map_err(context(path))?;
                ck.config.workers = args.workers;
                drive(Trainer::resume(ck, &train_bundle, eval_bundle.as_ref())?, AnyHead::Space, &outputs)?
            }
            HeadKind::Baseline | HeadKind::Linear => {
                let mut ck: Checkpoint<BaselineHeadParams> = Checkpoint::load(path).map_err(context(path))?;
                ck.config.workers = args.workers;
                drive(Trainer::resume(ck, &train_bundle, eval_bundle.as_ref())?, AnyHead::Baseline, &outputs)?
            }
        }
    } else {
        let config = train_config(&args);
        config.validate().map_err(|e| Failure::usage(e.to_string()))?;
        let n_classes = match args.classes {
            Some(c) => c,
            None => train_bundle.label_count(),
        };
        let head = SpaceHeadConfig {
            embed_dim: train_bundle.embed_dim(),
            latent_dim: args.latent_dim.unwrap_or(DEFAULT_LATENT_DIM),
            n_spaces: args.spaces.unwrap_or(n_classes),
            n_classes,
        };
        head.validate().map_err(|e| Failure::usage(e.to_string()))?;
        header("train", json!({ "head": head, "train": config }));
        match initial_head(&head, &config)? {
            AnyHead::Space(p) => drive(
                Trainer::new(p, &train_bundle, eval_bundle.as_ref(), config)?,
                AnyHead::Space,
                &outputs,
            )?,
            AnyHead::Baseline(p) => drive(
                Trainer::new(p, &train_bundle, eval_bundle.as_ref(), config)?,
                AnyHead::Baseline,
                &outputs,
            )?,
        }
    };
    if let Some(r) = report {
        print_report(&r, args.json)?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    header("eval", json!({ "model": args.model, "embeddings": args.embeddings }));
    let head = load_head(&args.model)?;
    let bundle = load_bundle(&args.embeddings)?;
    let report = evaluate_head(&head, &bundle)?;
    print_report(&report, args.json)
}

fn cmd_zero_shot(args: ZeroShotArgs) -> CliResult {
    header(
        "zero-shot",
        json!({ "model": args.model, "embeddings": args.embeddings, "label_map": args.label_map }),
    );
    let head = load_head(&args.model)?;
    let bundle = load_bundle(&args.embeddings)?;
    let map = LabelMap::load(&args.label_map).map_err(context(&args.label_map))?;
    let report = evaluate_zero_shot(&head, &bundle, &map)?;
    print_report(&report, args.json)
}

fn cmd_project(args: ProjectArgs) -> CliResult {
    header(
        "project",
        json!({ "model": args.model, "embeddings": args.embeddings, "out": args.out }),
    );
    let params = match load_head(&args.model)? {
        AnyHead::Space(p) => p,
        AnyHead::Baseline(_) => return Err(Failure::usage("project needs a space head model")),
    };
    let bundle = load_bundle(&args.embeddings)?;
    match &args.out {
        Some(path) => export_projections(&params, &bundle, path).map_err(context(path))?,
        None => {
            let mut out = std::io::BufWriter::new(std::io::stdout().lock());
            write_projections(&params, &bundle, &mut out)?;
            out.flush().map_err(Error::from)?;
        }
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> CliResult {
    let spec = SynthSpec::axis_clusters(
        args.classes,
        args.n,
        args.seq_len,
        args.dim,
        args.separation,
        args.stddev,
        args.seed,
    )
    .map_err(|e| Failure::usage(e.to_string()))?;
    header(
        "synth",
        json!({
            "classes": args.classes, "n": args.n, "seq_len": args.seq_len, "dim": args.dim,
            "separation": args.separation, "stddev": args.stddev, "seed": args.seed, "out": args.out,
        }),
    );
    let bundle = generate_synthetic(&spec)?;
    write_bundle(&bundle, &args.out).map_err(context(&args.out))?;
    if let Some(path) = &args.manifest {
        let manifest = Manifest {
            name: format!("synthetic-{}c-seed{}", args.classes, args.seed),
            classes: (0..args.classes).map(|c| format!("class_{c}")).collect(),
            bundle: args.out.display().to_string(),
            base_model: "synthetic".into(),
            pooling: "none".into(),
        };
        manifest.save(path).map_err(context(path))?;
    }
    Ok(())
}

fn describe_head(head: &AnyHead) -> serde_json::Value {
    match head {
        AnyHead::Space(p) => {
            let c = p.config();
            json!({
                "kind": "space",
                "embed_dim": c.embed_dim,
                "latent_dim": c.latent_dim,
                "n_spaces": c.n_spaces,
                "n_classes": c.n_classes,
                "parameter_count": head.parameter_count(),
            })
        }
        AnyHead::Baseline(p) => json!({
            "kind": if p.has_pre_layer() { "baseline" } else { "linear" },
            "embed_dim": p.embed_dim(),
            "n_classes": p.n_classes(),
            "parameter_count": head.parameter_count(),
        }),
    }
}

fn describe_bundle(b: &EmbeddingBundle) -> serde_json::Value {
    let labels = if b.has_labels() { Some(b.label_count()) } else { None };
    json!({
        "examples": b.len(),
        "seq_len": b.seq_len(),
        "embed_dim": b.embed_dim(),
        "has_labels": b.has_labels(),
        "label_count": labels,
    })
}

fn print_description(title: &str, v: &serde_json::Value, as_json: bool) {
    if as_json {
        println!("{v}");
        return;
    }
    println!("{title}");
    if let Some(map) = v.as_object() {
        for (k, val) in map {
            let shown = match val {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            println!("  {k:<16} {shown}");
        }
    }
}

fn cmd_inspect(args: InspectArgs) -> CliResult {
    header("inspect", json!({ "model": args.model, "embeddings": args.embeddings }));
    if let Some(path) = &args.model {
        let head = load_head(path)?;
        print_description("model", &describe_head(&head), args.json);
    }
    if let Some(path) = &args.embeddings {
        let bundle = load_bundle(path)?;
        print_description("bundle", &describe_bundle(&bundle), args.json);
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> CliResult {
    let config = SpaceHeadConfig {
        embed_dim: args.dim,
        latent_dim: args.latent_dim,
        n_spaces: args.spaces,
        n_classes: args.classes,
    };
    config.validate().map_err(|e| Failure::usage(e.to_string()))?;
    if args.batch_size == 0 || args.seq_len == 0 {
        return Err(Failure::usage("batch-size and seq-len must be at least 1"));
    }
    let loss = LossConfig::with_intra_weight(args.intra_weight);
    loss.validate().map_err(|e| Failure::usage(e.to_string()))?;
    header(
        "gradcheck",
        json!({ "head": config, "seq_len": args.seq_len, "batch_size": args.batch_size,
                "intra_weight": args.intra_weight, "seed": args.seed, "step": DEFAULT_FD_STEP }),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let params = SpaceHeadParams::init(&config, rng.random())?;
    let mut mats = Vec::with_capacity(args.batch_size);
    let mut masks = Vec::with_capacity(args.batch_size);
    let mut labels = Vec::with_capacity(args.batch_size);
    for _ in 0..args.batch_size {
        let data = (0..args.seq_len * args.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        mats.push(Matrix::from_vec(args.seq_len, args.dim, data)?);
        let mut mask: Vec<bool> = (0..args.seq_len).map(|_| rng.random_bool(0.75)).collect();
        mask[0] = true;
        masks.push(mask);
        labels.push(rng.random_range(0..args.classes));
    }
    let batch: Vec<Sample> = (0..args.batch_size)
        .map(|i| Sample {
            embeddings: &mats[i],
            mask: &masks[i],
            label: labels[i],
        })
        .collect();
    let r = finite_difference_check(&params, &batch, &loss, DEFAULT_FD_STEP)?;
    let pass = r.max_relative_error <= GRADCHECK_TOLERANCE;
    if args.json {
        println!(
            "{}",
            json!({
                "max_relative_error": r.max_relative_error,
                "worst_parameter": r.worst_parameter,
                "analytic": r.analytic,
                "numeric": r.numeric,
                "checked": r.checked,
                "tolerance": GRADCHECK_TOLERANCE,
                "pass": pass,
            })
        );
    } else {
        println!("parameters checked  {}", r.checked);
        println!("max relative error  {:.3e}", r.max_relative_error);
        println!(
            "worst parameter     {} (analytic {:.6e}, numeric {:.6e})",
            r.worst_parameter, r.analytic, r.numeric
        );
        println!("result              {}", if pass { "pass" } else { "FAIL" });
    }
    if pass {
        Ok(())
    } else {
        Err(Failure::numeric(format!(
            "gradient check failed: {:.3e} > {GRADCHECK_TOLERANCE:e}",
            r.max_relative_error
        )))
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train(a) => cmd_train(*a),
        Command::Eval(a) => cmd_eval(a),
        Command::ZeroShot(a) => cmd_zero_shot(a),
        Command::Project(a) => cmd_project(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
