//! Command-line interface: training, prediction, evaluation, gradient
//! checks, synthetic data and rendering.

mod checkpoint;
mod render;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::data::{load_funsd, save_funsd, synth_forms, DataError, Document, RelationPair, SynthConfig};
use crate::eval::{label_accuracy, micro_prf, Metrics};
use crate::model::{KvpFormer, ModelConfig, ModelError, Prediction};
use crate::numerics::{OpKind, ParamGroup};
use crate::training::{
    check_loss_gradients, gradcheck_documents, gradcheck_model, group_errors, history_csv, loss_check_options, train,
    TrainError, GRADCHECK_INIT_STD,
};

pub use checkpoint::{Checkpoint, CheckpointError, NamedTensor, RunConfig, MAGIC};
pub use render::{label_color, render_svg};

/// Gradient checks fail above this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Largest width a gradient-check model may use.
pub const GRADCHECK_MAX_DIM: usize = 32;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Invalid(String),
    #[error("predictions and gold disagree on documents; missing predictions: [{}]; unknown documents: [{}]", missing.join(", "), extra.join(", "))]
    DocMismatch { missing: Vec<String>, extra: Vec<String> },
    #[error("gradient check failed: max relative error {max:.3e} exceeds {GRADCHECK_TOLERANCE:e}")]
    GradCheckFailed { max: f64 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "kvpformer", version, about = "Key-value pair extraction from forms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint plus its loss history.
    Train(TrainArgs),
    /// Predict key-value pairs for every document in a directory.
    Predict(PredictArgs),
    /// Score a predictions file against gold annotations.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of the training loss.
    Gradcheck(GradcheckArgs),
    /// Write synthetic forms in the annotation schema.
    Synth(SynthArgs),
    /// Draw documents with gold or given pairs, without a model.
    #[command(name = "render-only", alias = "render")]
    RenderOnly(RenderArgs),
}

/// `ROWSxCOLS:COUNT`, e.g. `2x2:8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub cols: usize,
    pub count: usize,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected ROWSxCOLS, got {s:?}"))?;
    let r: usize = r.trim().parse().map_err(|_| format!("bad row count in {s:?}"))?;
    let c: usize = c.trim().parse().map_err(|_| format!("bad column count in {s:?}"))?;
    if r == 0 || c == 0 {
        return Err(format!("grid {s:?} must have at least one row and column"));
    }
    Ok((r, c))
}

pub fn parse_synthetic(s: &str) -> Result<SyntheticSpec, String> {
    let (grid, count) = s
        .split_once(':')
        .ok_or_else(|| format!("expected ROWSxCOLS:COUNT, got {s:?}"))?;
    let (rows, cols) = parse_grid(grid)?;
    let count = count
        .trim()
        .parse()
        .map_err(|_| format!("bad document count in {s:?}"))?;
    Ok(SyntheticSpec { rows, cols, count })
}

#[derive(Debug, Clone, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["data", "synthetic"]))]
pub struct TrainArgs {
    /// Directory of annotation JSON files.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generate training forms instead, e.g. `2x2:8`.
    #[arg(long, value_parser = parse_synthetic)]
    pub synthetic: Option<SyntheticSpec>,
    /// JSON file with optional `model` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the training seed (also seeds synthetic data).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Loss history CSV; defaults to the checkpoint path with `.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Predictions JSON `{doc_id: [[key_id, value_id], ...]}`.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one SVG per document into this directory.
    #[arg(long)]
    pub render: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// JSON file whose `model` section overrides the toy configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print the error of every parameter.
    #[arg(long)]
    pub verbose: bool,
    /// Scale the backward rule of this op (checker self-test).
    #[arg(long, hide = true)]
    pub fault_op: Option<String>,
    #[arg(long, hide = true, default_value_t = 1.1)]
    pub fault_scale: f64,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Grid of key-value cells, `ROWSxCOLS`.
    #[arg(long, default_value = "2x2", value_parser = parse_grid)]
    pub grid: (usize, usize),
    /// Distractor entities per key/value entity.
    #[arg(long, default_value_t = 0.5)]
    pub distractors: f64,
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for SVG files.
    #[arg(long)]
    pub out: PathBuf,
    /// Predictions JSON to draw instead of the gold links.
    #[arg(long)]
    pub pred: Option<PathBuf>,
}

/// Parses the process arguments, runs the command and maps failures to
/// exit code 1 (usage errors exit with 2 from the parser).
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Predict(a) => cmd_predict(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::Synth(a) => cmd_synth(&a, out),
        Command::RenderOnly(a) => cmd_render(&a, out),
    }
}

fn say(out: &mut dyn Write, line: &str) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(io_err(Path::new("<stdout>")))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let config: RunConfig = serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    config.model.validate().map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    config.train.validate().map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(config)
}

/// Micro relation metrics plus label accuracy over all entities.
pub fn score(docs: &[Document], predictions: &[Prediction]) -> Result<Metrics, CliError> {
    let mut m = micro_prf(
        predictions
            .iter()
            .map(|p| &p.pairs)
            .zip(docs.iter().map(|d| &d.gold_pairs)),
    );
    let predicted: Vec<_> = predictions
        .iter()
        .flat_map(|p| p.predicted_labels.iter().copied())
        .collect();
    let gold: Vec<_> = docs.iter().flat_map(|d| d.labels()).collect();
    m.label_accuracy = Some(label_accuracy(&predicted, &gold).map_err(|e| CliError::Invalid(e.to_string()))?);
    Ok(m)
}

fn predict_all(model: &KvpFormer, docs: &[Document]) -> Result<Vec<Prediction>, CliError> {
    docs.iter().map(|d| model.predict(d).map_err(CliError::from)).collect()
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut config = load_run_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    let docs = match (&args.data, args.synthetic) {
        (Some(dir), _) => load_funsd(dir)?,
        (None, Some(spec)) => synth_forms(config.train.seed, spec.count, &SynthConfig::grid(spec.rows, spec.cols)),
        (None, None) => return Err(CliError::Invalid("one of --data or --synthetic is required".into())),
    };
    if docs.is_empty() {
        return Err(CliError::Invalid("no training documents".into()));
    }
    if let Some(d) = docs.iter().find(|d| d.is_empty()) {
        return Err(CliError::Invalid(format!("document {} has no entities", d.id)));
    }
    let loss_path = args
        .loss_csv
        .clone()
        .unwrap_or_else(|| args.out.with_extension("loss.csv"));

    let mut model = KvpFormer::new(config.model.clone(), config.train.init_std, config.train.seed)?;
    let history = train(&mut model, &docs, &config.train)?;
    model.params_mut().round_to_f32();
    let metrics = score(&docs, &predict_all(&model, &docs)?)?;

    write_file(&args.out, &Checkpoint::from_model(&model, &config.train).to_bytes())?;
    write_file(&loss_path, history_csv(&history).as_bytes())?;
    say(out, &metrics.to_json())
}

/// `{doc_id: [[key_id, value_id], ...]}` with ids sorted.
pub fn predictions_json(docs: &[Document], predictions: &[Prediction]) -> String {
    let map: BTreeMap<&str, Vec<[usize; 2]>> = docs
        .iter()
        .zip(predictions)
        .map(|(d, p)| (d.id.as_str(), p.pairs.iter().map(|r| [r.key_id, r.value_id]).collect()))
        .collect();
    serde_json::to_string_pretty(&map).expect("predictions serialize") + "\n"
}

pub fn cmd_predict(args: &PredictArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let model = Checkpoint::load(&args.ckpt)?.into_model()?;
    let docs = load_funsd(&args.data)?;
    let predictions = predict_all(&model, &docs)?;
    let metrics = score(&docs, &predictions)?;
    let svgs: Vec<(PathBuf, String)> = match &args.render {
        Some(dir) => docs
            .iter()
            .zip(&predictions)
            .map(|(d, p)| {
                (
                    dir.join(format!("{}.svg", d.id)),
                    render_svg(d, Some(&p.predicted_labels), &p.pairs),
                )
            })
            .collect(),
        None => Vec::new(),
    };

    write_file(&args.out, predictions_json(&docs, &predictions).as_bytes())?;
    if let Some(dir) = &args.render {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    for (path, svg) in svgs {
        write_file(&path, svg.as_bytes())?;
    }
    say(out, &metrics.to_json())
}

/// Reads a predictions file. An empty file or `{}` means no predictions.
pub fn read_predictions(path: &Path) -> Result<Option<BTreeMap<String, BTreeSet<RelationPair>>>, CliError> {
    let text = read_text(path)?;
    if text.trim().is_empty() {
        return Ok(None);
    }
    let raw: BTreeMap<String, Vec<[usize; 2]>> = serde_json::from_str(&text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: format!("predictions must map document ids to [[key_id, value_id], ...]: {e}"),
    })?;
    if raw.is_empty() {
        return Ok(None);
    }
    Ok(Some(
        raw.into_iter()
            .map(|(id, pairs)| (id, pairs.into_iter().map(|[k, v]| RelationPair::new(k, v)).collect()))
            .collect(),
    ))
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let pred = read_predictions(&args.pred)?;
    let gold = load_funsd(&args.gold)?;
    let empty = BTreeSet::new();
    let metrics = match &pred {
        None => micro_prf(gold.iter().map(|d| (&empty, &d.gold_pairs))),
        Some(pred) => {
            let gold_ids: BTreeSet<&str> = gold.iter().map(|d| d.id.as_str()).collect();
            let missing: Vec<String> = gold_ids
                .iter()
                .filter(|id| !pred.contains_key(**id))
                .map(|s| s.to_string())
                .collect();
            let extra: Vec<String> = pred
                .keys()
                .filter(|id| !gold_ids.contains(id.as_str()))
                .cloned()
                .collect();
            if !missing.is_empty() || !extra.is_empty() {
                return Err(CliError::DocMismatch { missing, extra });
            }
            micro_prf(gold.iter().map(|d| (&pred[&d.id], &d.gold_pairs)))
        }
    };
    say(out, &metrics.to_json())
}

/// The toy configuration with any fields from the config file's `model`
/// section applied on top.
fn gradcheck_config(path: Option<&Path>) -> Result<ModelConfig, CliError> {
    let toy = ModelConfig::toy();
    let Some(path) = path else {
        return Ok(toy);
    };
    let bad = |message: String| CliError::Config {
        path: path.to_path_buf(),
        message,
    };
    let file: serde_json::Value = serde_json::from_str(&read_text(path)?).map_err(|e| bad(e.to_string()))?;
    let mut merged = serde_json::to_value(&toy).expect("config serializes");
    match file.get("model") {
        Some(serde_json::Value::Object(fields)) => {
            for (k, v) in fields {
                merged[k] = v.clone();
            }
        }
        Some(_) => return Err(bad("\"model\" must be an object".into())),
        None => {}
    }
    let config: ModelConfig = serde_json::from_value(merged).map_err(|e| bad(e.to_string()))?;
    config.validate().map_err(|e| bad(e.to_string()))?;
    if [config.d_model, config.d_ffn, config.bias_hidden]
        .iter()
        .any(|&d| d > GRADCHECK_MAX_DIM)
    {
        return Err(bad(format!(
            "gradient checks need a toy model with widths <= {GRADCHECK_MAX_DIM}"
        )));
    }
    Ok(config)
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = gradcheck_config(args.config.as_deref())?;
    let fault = match &args.fault_op {
        Some(name) => Some((
            OpKind::from_name(name).ok_or_else(|| CliError::Invalid(format!("unknown op {name:?}")))?,
            args.fault_scale,
        )),
        None => None,
    };
    let mut model = gradcheck_model(config, GRADCHECK_INIT_STD, args.seed)?;
    let docs = gradcheck_documents(args.seed);
    let report = check_loss_gradients(&mut model, &docs, &loss_check_options(args.seed), fault)?;
    if args.verbose {
        for p in &report.params {
            say(
                out,
                &format!(
                    "param {} max_rel_error {:.3e} coords {}",
                    p.name, p.max_rel_error, p.coords_checked
                ),
            )?;
        }
    }
    for (group, err) in group_errors(&model, &report) {
        let name = match group {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Head => "head",
        };
        say(out, &format!("group {name} max_rel_error {err:.3e}"))?;
    }
    let verdict = if report.max_rel_error < GRADCHECK_TOLERANCE {
        "PASS"
    } else {
        "FAIL"
    };
    say(
        out,
        &format!(
            "max_rel_error {:.3e} coords {} kinks_skipped {} tolerance {GRADCHECK_TOLERANCE:e} {verdict}",
            report.max_rel_error,
            report.coords_checked(),
            report.kinks_skipped()
        ),
    )?;
    if report.max_rel_error < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::GradCheckFailed {
            max: report.max_rel_error,
        })
    }
}

pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if !(args.distractors.is_finite() && args.distractors >= 0.0) {
        return Err(CliError::Invalid("--distractors must be a non-negative number".into()));
    }
    let config = SynthConfig {
        rows: args.grid.0,
        cols: args.grid.1,
        distractor_fraction: args.distractors,
    };
    let docs = synth_forms(args.seed, args.count, &config);
    save_funsd(&docs, &args.out)?;
    say(
        out,
        &format!("wrote {} documents to {}", docs.len(), args.out.display()),
    )
}

pub fn cmd_render(args: &RenderArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let docs = load_funsd(&args.data)?;
    let pred = match &args.pred {
        Some(p) => read_predictions(p)?.unwrap_or_default(),
        None => BTreeMap::new(),
    };
    let empty = BTreeSet::new();
    let svgs: Vec<(PathBuf, String)> = docs
        .iter()
        .map(|d| {
            let pairs = match &args.pred {
                Some(_) => pred.get(&d.id).unwrap_or(&empty),
                None => &d.gold_pairs,
            };
            (args.out.join(format!("{}.svg", d.id)), render_svg(d, None, pairs))
        })
        .collect();
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    for (path, svg) in &svgs {
        write_file(path, svg.as_bytes())?;
    }
    say(
        out,
        &format!("wrote {} SVG files to {}", svgs.len(), args.out.display()),
    )
}
