//! The `icr-policy` command line: data preparation, the experiment grid,
//! evaluation reports and the certainty analysis.
//!
//! Exit codes: 0 success, 1 validation error, 2 data error, 3 runtime
//! failure. Run directories are versioned by run name and never silently
//! overwritten.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{self, GameStateInput, Split, Task};
use crate::encoders::backbone::{Backbone, ResNet50Backbone, TinyConvBackbone};
use crate::encoders::bert::BertTextEncoder;
use crate::encoders::scene::RENDER_RESOLUTION;
use crate::encoders::text::{HashedTextEncoder, TextEmbedder};
use crate::error::{Error, Result};
use crate::evaluation::{
    self, ActionAggregation, PredictionDump, Report,
};
use crate::model::batch::Collator;
use crate::model::{ModelConfig, PolicyModel, Variant};
use crate::training::{self, TrainConfig, TrainEnv};

/// Environment variable naming the clipart art-pack directory.
pub const ASSET_ENV: &str = "ICR_ASSET_PACK";

#[derive(Parser)]
#[command(name = "icr-policy", version, about = "iCR policy pipeline for the CoDraw game")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load the dialogues and annotation, build per-turn records for both
    /// tasks and write the canonical record files plus the statistics table.
    PrepareData {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        annotation: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one experiment spec or a whole grid.
    Train(TrainArgs),
    /// Build a comparison report over finished runs.
    Report {
        /// Run directories to include.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Optional reference metric file for signed deltas.
        #[arg(long)]
        reference_metrics: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pool action scores or macro-average per action type.
        #[arg(long, default_value = "pooled")]
        action_aggregation: String,
    },
    /// Certainty analysis of a trained action model.
    AnalyzeCertainty {
        /// Run directory of the action model (gallery + dialogue inputs).
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Directory produced by prepare-data.
    #[arg(long)]
    data: PathBuf,
    /// Directory receiving one subdirectory per run.
    #[arg(long)]
    out: PathBuf,
    /// A single experiment spec (TOML).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// A grid file with `[[experiment]]` entries (TOML).
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Only run grid entries whose name contains this substring.
    #[arg(long)]
    filter: Option<String>,
    /// Override the seed of every selected run.
    #[arg(long)]
    seed: Option<u64>,
    /// Force seeded deterministic execution on or off.
    #[arg(long)]
    deterministic: Option<bool>,
    #[arg(long, default_value = "cpu")]
    device: String,
    /// Tensor precision: f32 or f64.
    #[arg(long, default_value = "f32")]
    dtype: String,
    /// hashed[:width=W,seed=S] or bert:DIR
    #[arg(long, default_value = "hashed")]
    text_encoder: String,
    /// tiny[:seed=S], resnet50 (seeded random) or resnet50:WEIGHTS.safetensors
    #[arg(long, default_value = "tiny")]
    backbone: String,
    #[arg(long, default_value_t = RENDER_RESOLUTION)]
    render_resolution: u32,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    context_length: Option<usize>,
}

/// One entry of an experiment file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub variant: String,
    pub task: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    /// Run name (or checkpoint path) whose action modules initialise this
    /// run; selects the fine-tuning protocol.
    #[serde(default)]
    pub pretrained_from: Option<String>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Deserialize)]
struct GridFile {
    #[serde(default)]
    experiment: Vec<ExperimentSpec>,
}

impl ExperimentSpec {
    /// Resolve into full configs; validation failures surface before any
    /// compute starts.
    pub fn resolve(&self) -> Result<(ModelConfig, TrainConfig)> {
        let mut model = self.model.clone().unwrap_or_default();
        model.variant = self.variant.parse()?;
        model.task = self.task.parse()?;
        model.use_dialogue = false;
        model.use_scene_before = false;
        model.use_scene_after = false;
        model.use_gold_actions = false;
        model.use_action_logits = false;
        for flag in &self.inputs {
            match flag.as_str() {
                "G" => {}
                "D" => model.use_dialogue = true,
                "S_b" => model.use_scene_before = true,
                "S_a" => model.use_scene_after = true,
                "A" => model.use_gold_actions = true,
                "L_A" => model.use_action_logits = true,
                other => {
                    return Err(Error::config(format!(
                        "experiment `{}`: unknown input flag `{other}`",
                        self.name
                    )))
                }
            }
        }
        model
            .validate()
            .map_err(|e| Error::config(format!("experiment `{}`: {e}", self.name)))?;
        let train = self.train.clone().unwrap_or_default();
        train.validate()?;
        Ok((model, train))
    }
}

/// Load a spec or grid file.
pub fn load_specs(path: &Path, grid: bool) -> Result<Vec<ExperimentSpec>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if grid {
        let parsed: GridFile = toml::from_str(&text)
            .map_err(|e| Error::config(format!("cannot parse {}: {e}", path.display())))?;
        Ok(parsed.experiment)
    } else {
        let parsed: ExperimentSpec = toml::from_str(&text)
            .map_err(|e| Error::config(format!("cannot parse {}: {e}", path.display())))?;
        Ok(vec![parsed])
    }
}

fn parse_device(s: &str) -> Result<Device> {
    match s {
        "cpu" => Ok(Device::Cpu),
        #[cfg(feature = "cuda")]
        s if s.starts_with("cuda") => {
            let idx = s.strip_prefix("cuda:").and_then(|i| i.parse().ok()).unwrap_or(0);
            Ok(Device::new_cuda(idx)?)
        }
        other => Err(Error::config(format!(
            "unsupported device `{other}` in this build"
        ))),
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::config(format!("unsupported dtype `{other}`"))),
    }
}

fn kv_options(spec: &str) -> BTreeMap<String, String> {
    spec.split(',')
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// Build a frozen text embedder from its CLI descriptor.
pub fn build_text_encoder(descriptor: &str, device: &Device) -> Result<Box<dyn TextEmbedder>> {
    if descriptor == "hashed" {
        return Ok(Box::new(HashedTextEncoder::new(768, 12345)));
    }
    if let Some(opts) = descriptor.strip_prefix("hashed:") {
        let opts = kv_options(opts);
        let width = opts.get("width").and_then(|v| v.parse().ok()).unwrap_or(768);
        let seed = opts.get("seed").and_then(|v| v.parse().ok()).unwrap_or(12345);
        return Ok(Box::new(HashedTextEncoder::new(width, seed)));
    }
    if let Some(dir) = descriptor.strip_prefix("bert:") {
        return Ok(Box::new(BertTextEncoder::from_dir(dir, device)?));
    }
    Err(Error::config(format!(
        "unknown text encoder `{descriptor}` (expected hashed[:...] or bert:DIR)"
    )))
}

/// Build a frozen image backbone from its CLI descriptor.
pub fn build_backbone(descriptor: &str, device: &Device) -> Result<Arc<Backbone>> {
    if descriptor == "tiny" {
        return Ok(Arc::new(Backbone::Tiny(TinyConvBackbone::new(12345, device)?)));
    }
    if let Some(opts) = descriptor.strip_prefix("tiny:") {
        let opts = kv_options(opts);
        let seed = opts.get("seed").and_then(|v| v.parse().ok()).unwrap_or(12345);
        return Ok(Arc::new(Backbone::Tiny(TinyConvBackbone::new(seed, device)?)));
    }
    if descriptor == "resnet50" {
        return Ok(Arc::new(Backbone::ResNet50(ResNet50Backbone::random(
            12345, device,
        )?)));
    }
    if let Some(path) = descriptor.strip_prefix("resnet50:") {
        return Ok(Arc::new(Backbone::ResNet50(
            ResNet50Backbone::from_safetensors(path, device)?,
        )));
    }
    Err(Error::config(format!(
        "unknown backbone `{descriptor}` (expected tiny[:...], resnet50 or resnet50:WEIGHTS)"
    )))
}

fn records_path(data: &Path, task: Task, split: Split) -> PathBuf {
    data.join(format!("records_{task}_{split}.csv"))
}

fn load_records(data: &Path, task: Task, split: Split) -> Result<Vec<GameStateInput>> {
    corpus::read_records(records_path(data, task, split))
}

fn asset_dir() -> Option<PathBuf> {
    std::env::var_os(ASSET_ENV).map(PathBuf::from)
}

fn cmd_prepare_data(dataset: &Path, annotation: &Path, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let games = corpus::load_dialogues(dataset)?;
    let annotations = corpus::load_icr_annotation(annotation)?;
    log::info!("loaded {} games, {} annotation rows", games.len(), annotations.len());
    let when = corpus::build_turn_records(&games, &annotations, Task::When)?;
    let what = corpus::build_turn_records(&games, &annotations, Task::What)?;
    for split in Split::ALL {
        let w: Vec<GameStateInput> = when.iter().filter(|r| r.split == split).cloned().collect();
        corpus::write_records(records_path(out, Task::When, split), &w)?;
        let x: Vec<GameStateInput> = what.iter().filter(|r| r.split == split).cloned().collect();
        corpus::write_records(records_path(out, Task::What, split), &x)?;
    }
    let stats = corpus::dataset_statistics(&when, &what);
    let csv = stats.to_csv();
    fs::write(out.join("statistics.csv"), &csv)
        .map_err(|e| Error::io(out.join("statistics.csv"), e))?;
    fs::write(
        out.join("statistics.json"),
        serde_json::to_string_pretty(&stats)?,
    )
    .map_err(|e| Error::io(out.join("statistics.json"), e))?;
    print!("{csv}");
    Ok(())
}

/// Snapshot written into each run directory; reproduces the run.
#[derive(Serialize)]
struct RunSnapshot<'a> {
    schema: &'a str,
    spec: &'a ExperimentSpec,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    text_encoder: Option<String>,
    text_encoder_checksum: Option<String>,
    backbone: Option<String>,
    backbone_checksum: Option<String>,
    render_resolution: u32,
}

fn run_one_spec(spec: &ExperimentSpec, args: &TrainArgs, device: &Device, dtype: DType) -> Result<()> {
    let (mut model_cfg, mut train_cfg) = spec.resolve()?;
    if let Some(seed) = args.seed {
        model_cfg.seed = seed;
        train_cfg.seed = seed;
    }
    if let Some(d) = args.deterministic {
        train_cfg.deterministic = d;
    }
    if let Some(b) = args.batch_size {
        train_cfg.batch_size = b;
    }
    if let Some(e) = args.max_epochs {
        train_cfg.max_epochs = e;
    }
    if let Some(c) = args.context_length {
        train_cfg.context_length = c;
    }

    let run_dir = args.out.join(&spec.name);
    if run_dir.exists() {
        return Err(Error::config(format!(
            "run directory {} already exists; choose a new run name",
            run_dir.display()
        )));
    }
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;

    let text_encoder: Option<Box<dyn TextEmbedder>> = if model_cfg.use_dialogue {
        let enc = build_text_encoder(&args.text_encoder, device)?;
        model_cfg.text_width = enc.width();
        Some(enc)
    } else {
        None
    };
    let needs_scenes = model_cfg.use_scene_before || model_cfg.use_scene_after;
    let backbone = if needs_scenes {
        Some(build_backbone(&args.backbone, device)?)
    } else {
        None
    };

    let task = model_cfg.task;
    let train_records = load_records(&args.data, task, Split::Train)?;
    let val_records = load_records(&args.data, task, Split::Val)?;
    let test_records = load_records(&args.data, task, Split::Test)?;

    let snapshot = RunSnapshot {
        schema: "icr-run-v1",
        spec,
        model: &model_cfg,
        train: &train_cfg,
        text_encoder: text_encoder.as_ref().map(|e| e.identifier()),
        text_encoder_checksum: text_encoder.as_ref().map(|e| e.checksum()),
        backbone: backbone.as_ref().map(|b| b.identifier()),
        backbone_checksum: backbone.as_ref().map(|b| b.checksum()).transpose()?,
        render_resolution: args.render_resolution,
    };
    fs::write(
        run_dir.join("config.json"),
        serde_json::to_string_pretty(&snapshot)?,
    )
    .map_err(|e| Error::io(run_dir.join("config.json"), e))?;

    let assets = asset_dir();
    let env = TrainEnv {
        text_encoder: text_encoder.as_deref(),
        render_resolution: args.render_resolution,
        assets: assets.as_deref(),
        run_dir: &run_dir,
    };

    let outcome = match &spec.pretrained_from {
        Some(source) => {
            let ckpt = resolve_pretrained(source, &args.out)?;
            let (_, outcome) = training::finetune_what(
                ckpt,
                model_cfg.clone(),
                &train_records,
                &val_records,
                &train_cfg,
                &env,
                device,
                backbone.clone(),
            )?;
            outcome
        }
        None => {
            let mut model = PolicyModel::new(model_cfg.clone(), device, dtype, backbone.clone())?;
            training::train(&mut model, &train_records, &val_records, &train_cfg, &env)?
        }
    };
    log::info!(
        "run `{}`: best epoch {} with metric {:.4} ({} epochs)",
        spec.name,
        outcome.best_epoch,
        outcome.best_metric,
        outcome.epochs_run
    );

    // reload the best checkpoint and dump test predictions
    let (best, _) = training::load_model(&outcome.best_checkpoint, device, dtype, backbone)?;
    let collator = Collator {
        cfg: best.config(),
        text_encoder: text_encoder.as_deref(),
        context_length: train_cfg.context_length,
        render_resolution: args.render_resolution,
        assets: assets.as_deref(),
        device,
        dtype,
    };
    let dump = evaluation::predict_records(&best, &collator, &test_records, train_cfg.batch_size)?;
    dump.save(run_dir.join("dump.json"))?;
    let row = evaluation::metrics_row(
        &dump,
        best.config().variant_label().to_string(),
        best.config().input_flags(),
        ActionAggregation::Pooled,
    )?;
    fs::write(
        run_dir.join("metrics.json"),
        serde_json::to_string_pretty(&row)?,
    )
    .map_err(|e| Error::io(run_dir.join("metrics.json"), e))?;
    Ok(())
}

fn resolve_pretrained(source: &str, runs_root: &Path) -> Result<PathBuf> {
    let as_path = PathBuf::from(source);
    if as_path.is_file() {
        return Ok(as_path);
    }
    let candidate = runs_root.join(source).join("best.ckpt");
    if candidate.is_file() {
        return Ok(candidate);
    }
    Err(Error::config(format!(
        "pretrained source `{source}` is neither a checkpoint file nor a finished run under {}",
        runs_root.display()
    )))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let device = parse_device(&args.device)?;
    let dtype = parse_dtype(&args.dtype)?;
    let mut specs = match (&args.spec, &args.grid) {
        (Some(path), None) => load_specs(path, false)?,
        (None, Some(path)) => load_specs(path, true)?,
        _ => {
            return Err(Error::config(
                "pass exactly one of --spec FILE or --grid FILE",
            ))
        }
    };
    if let Some(filter) = &args.filter {
        specs.retain(|s| s.name.contains(filter.as_str()));
    }
    if specs.is_empty() {
        return Err(Error::config("no experiments selected"));
    }
    // fail fast on any invalid spec before compute starts
    for spec in &specs {
        spec.resolve()?;
    }
    for spec in &specs {
        run_one_spec(spec, args, &device, dtype)?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct RunConfigView {
    model: ModelConfig,
}

fn cmd_report(
    runs: &[PathBuf],
    reference: Option<&Path>,
    out: Option<&Path>,
    agg: ActionAggregation,
) -> Result<()> {
    let mut rows = Vec::new();
    for run in runs {
        let dump_path = run.join("dump.json");
        if !dump_path.is_file() {
            return Err(Error::data(format!(
                "{} has no prediction dump; did the run finish?",
                run.display()
            )));
        }
        let dump = PredictionDump::load(&dump_path)?;
        let config_text = fs::read_to_string(run.join("config.json"))
            .map_err(|e| Error::io(run.join("config.json"), e))?;
        let view: RunConfigView = serde_json::from_str(&config_text)?;
        rows.push(evaluation::metrics_row(
            &dump,
            view.model.variant_label().to_string(),
            view.model.input_flags(),
            agg,
        )?);
    }
    let reference = reference.map(evaluation::load_reference_metrics).transpose()?;
    let report = Report { rows, reference };
    let csv = report.to_csv();
    if let Some(path) = out {
        fs::write(path, &csv).map_err(|e| Error::io(path, e))?;
    }
    print!("{csv}");
    Ok(())
}

fn cmd_analyze_certainty(run: &Path, out: &Path) -> Result<()> {
    let config_text = fs::read_to_string(run.join("config.json"))
        .map_err(|e| Error::io(run.join("config.json"), e))?;
    let view: RunConfigView = serde_json::from_str(&config_text)?;
    let cfg = &view.model;
    let is_action_taker_gd = cfg.variant == Variant::ActionTaker
        && cfg.use_dialogue
        && !cfg.use_scene_before
        && !cfg.use_scene_after;
    if !is_action_taker_gd {
        return Err(Error::config(format!(
            "certainty analysis requires an Action-Taker run with inputs `G, D`; \
             this run is {} with inputs `{}`",
            cfg.variant_label(),
            cfg.input_flags()
        )));
    }
    let dump = PredictionDump::load(run.join("dump.json"))?;
    let report = crate::certainty::write_h2_outputs(&dump, out)?;
    print!("{}", report.to_csv());
    Ok(())
}

/// Run the CLI; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::PrepareData {
            dataset,
            annotation,
            out,
        } => cmd_prepare_data(dataset, annotation, out),
        Command::Train(args) => cmd_train(args),
        Command::Report {
            runs,
            reference_metrics,
            out,
            action_aggregation,
        } => {
            let agg = match action_aggregation.as_str() {
                "pooled" => Ok(ActionAggregation::Pooled),
                "macro" => Ok(ActionAggregation::Macro),
                other => Err(Error::config(format!(
                    "unknown action aggregation `{other}`"
                ))),
            };
            agg.and_then(|agg| {
                cmd_report(runs, reference_metrics.as_deref(), out.as_deref(), agg)
            })
        }
        Command::AnalyzeCertainty { run, out } => cmd_analyze_certainty(run, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_resolution_rejects_conflicting_inputs() {
        let spec = ExperimentSpec {
            name: "bad".into(),
            variant: "icr_action_taker".into(),
            task: "when".into(),
            inputs: vec!["G".into(), "D".into(), "A".into(), "L_A".into()],
            pretrained_from: None,
            model: None,
            train: None,
        };
        let err = spec.resolve().unwrap_err();
        assert!(err.to_string().contains("mutually exclusive"));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn spec_resolution_builds_the_expected_config() {
        let spec = ExperimentSpec {
            name: "overhearer_gd_when".into(),
            variant: "overhearer".into(),
            task: "when".into(),
            inputs: vec!["G".into(), "D".into()],
            pretrained_from: None,
            model: None,
            train: None,
        };
        let (model, train) = spec.resolve().unwrap();
        assert_eq!(model.variant, Variant::Overhearer);
        assert!(model.use_dialogue);
        assert!(!model.use_scene_before);
        assert_eq!(model.input_flags(), "G, D");
        assert_eq!(train.batch_size, 32);
        assert_eq!(train.pos_weight, 2.0);
    }

    #[test]
    fn grid_file_parses_experiments() {
        let toml_text = r#"
            [[experiment]]
            name = "a"
            variant = "overhearer"
            task = "when"
            inputs = ["G", "D"]

            [[experiment]]
            name = "b"
            variant = "action_taker"
            task = "when"
            inputs = ["G", "D"]
            [experiment.train]
            max_epochs = 2
        "#;
        let parsed: GridFile = toml::from_str(toml_text).unwrap();
        assert_eq!(parsed.experiment.len(), 2);
        assert_eq!(parsed.experiment[1].train.as_ref().unwrap().max_epochs, 2);
        for spec in &parsed.experiment {
            spec.resolve().unwrap();
        }
    }

    #[test]
    fn encoder_descriptors_parse() {
        let dev = Device::Cpu;
        let enc = build_text_encoder("hashed:width=64,seed=9", &dev).unwrap();
        assert_eq!(enc.width(), 64);
        assert!(build_text_encoder("unknown", &dev).is_err());
        assert!(build_backbone("tiny:seed=5", &dev).is_ok());
        assert!(build_backbone("nope", &dev).is_err());
    }
}
