//! `surrogate` command line. Each command is a thin wrapper over a library
//! call; outputs are the files those calls produce plus a one-line JSON
//! summary on stdout.
//!
//! Exit codes: 0 success, 2 usage or validation error, 1 runtime error.

pub mod config;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use surrogate_core::diagnostics::{
    collect_latents, sample_in_range, sample_out_of_range, scatter_plot, validity_report, GroupLabel,
};
use surrogate_core::drag::{run_drag, DisappearanceWindow, DragConfig};
use surrogate_core::losses::{ExtractorSource, FeatureExtractor, LossWeights, PerceptualConfig, Reduction};
use surrogate_core::model::{Checkpoint, GeneratorConfig, Model};
use surrogate_core::patch::{select_patch, PatchOptions, Pixel};
use surrogate_core::synthdata::{
    build_dataset, load_manifest, DatasetManifest, DatasetPlan, ParameterSpec, ParameterVector, Sampling, Split,
};
use surrogate_core::training::{evaluate, train_with, LrSchedule, TrainConfig};
use surrogate_service::ServiceConfig;

use config::FileConfig;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;

/// Name of the final checkpoint written by `train`.
pub const MODEL_FILE: &str = "model.ckpt";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<surrogate_core::Error> for CliError {
    fn from(e: surrogate_core::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<surrogate_service::ApiError> for CliError {
    fn from(e: surrogate_service::ApiError) -> Self {
        if e.status().is_client_error() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "surrogate", version, about = "Parameter-to-image surrogate toolkit")]
pub struct Cli {
    /// Seed for every random choice (sampling, initialization, shuffling).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic dataset commands.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Train a surrogate on a dataset manifest.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Evaluate(EvaluateArgs),
    /// Generate one image.
    Predict(PredictArgs),
    /// Drag selected structures toward targets and record the trajectory.
    Drag(DragArgs),
    /// Latent-space diagnostics.
    Diagnose {
        #[command(subcommand)]
        command: DiagnoseCommand,
    },
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Sample, simulate and render a dataset with its manifest.
    Build(DatasetArgs),
}

#[derive(Debug, Subcommand)]
pub enum DiagnoseCommand {
    /// Embed latents of train, test, in-range and out-of-range parameters.
    Latents(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file with the parameter spec (default: the synthetic family).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Random sample count.
    #[arg(long, conflicts_with = "grid")]
    pub count: Option<usize>,
    /// Let random samples vary visualization parameters too.
    #[arg(long)]
    pub vary_vis: bool,
    /// Grid counts per parameter, comma separated (sim first, then vis).
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<usize>>,
    #[arg(long)]
    pub test_count: Option<usize>,
    /// Field model as inline JSON.
    #[arg(long)]
    pub field: Option<String>,
    /// Colormap as inline JSON.
    #[arg(long)]
    pub colormap: Option<String>,
}

#[derive(Debug, Args)]
pub struct GeneratorArgs {
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub mapping_depth: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub min_channels: Option<usize>,
    #[arg(long)]
    pub convs_per_block: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PerceptualArgs {
    /// Pretrained VGG-19 weights (safetensors); the built-in fallback
    /// extractor is used when absent.
    #[arg(long)]
    pub vgg: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub taps: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScheduleArg {
    Constant,
    Cosine,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ReductionArg {
    Mean,
    Sum,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Directory for the log, periodic checkpoints and `model.ckpt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleArg>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_enum)]
    pub reduction: Option<ReductionArg>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub device: Option<String>,
    #[command(flatten)]
    pub generator: GeneratorArgs,
    #[command(flatten)]
    pub perceptual: PerceptualArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Report path (JSON); printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub perceptual: PerceptualArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Physical values, simulation parameters first, comma separated.
    #[arg(long, allow_hyphen_values = true, value_delimiter = ',')]
    pub theta: Option<Vec<f64>>,
    /// PNG output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum WindowArg {
    Mean3x3,
    Pixel,
}

#[derive(Debug, Args)]
pub struct DragArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true, value_delimiter = ',')]
    pub theta: Option<Vec<f64>>,
    /// Clicked handle point `x,y`; repeat for several structures.
    #[arg(long, value_parser = parse_pixel)]
    pub select: Vec<Pixel>,
    /// Target `x,y`, one per `--select`.
    #[arg(long, value_parser = parse_pixel)]
    pub target: Vec<Pixel>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub max_extent: Option<f64>,
    /// Directory for `trajectory.ndjson` and the frames.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub r_m: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub disappearance_threshold: Option<f64>,
    #[arg(long, value_enum)]
    pub window: Option<WindowArg>,
    #[arg(long)]
    pub feature_layer: Option<String>,
    #[arg(long)]
    pub patch_dilation: Option<usize>,
    /// Simulation parameter allowed to change; repeat for several. All are
    /// free when none is given.
    #[arg(long)]
    pub free: Vec<String>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Report path (JSON); printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional scatter-plot PNG.
    #[arg(long)]
    pub plot: Option<PathBuf>,
    /// Uniform in-range samples to add.
    #[arg(long)]
    pub in_range: Option<usize>,
    /// Out-of-range samples to add.
    #[arg(long)]
    pub out_of_range: Option<usize>,
    /// How far out-of-range samples may leave each range, as a fraction of it.
    #[arg(long)]
    pub extent: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    pub idle_timeout_secs: Option<u64>,
}

fn parse_pixel(s: &str) -> Result<Pixel, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [x, y] => Ok([x.parse().map_err(|e| format!("{s}: {e}"))?, y.parse().map_err(|e| format!("{s}: {e}"))?]),
        _ => Err(format!("expected `x,y`, got `{s}`")),
    }
}

fn required<T>(value: Option<T>, what: &str) -> CliResult<T> {
    value.ok_or_else(|| CliError::Validation(format!("missing required `{what}` (flag or config file)")))
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> CliResult<T> {
    serde_json::from_str(text).map_err(|e| CliError::Validation(format!("{what}: {e}")))
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn theta_vector(spec: &ParameterSpec, values: &[f64]) -> CliResult<ParameterVector> {
    let want = spec.sim_dim() + spec.vis_dim();
    if values.len() != want {
        return Err(CliError::Validation(format!("theta has {} values, expected {want}", values.len())));
    }
    let theta = ParameterVector::new(values[..spec.sim_dim()].to_vec(), values[spec.sim_dim()..].to_vec());
    spec.check(&theta)?;
    Ok(theta)
}

fn perceptual(args: &PerceptualArgs, file: Option<PerceptualConfig>) -> PerceptualConfig {
    let mut cfg = file.unwrap_or_default();
    if let Some(p) = &args.vgg {
        cfg.source = ExtractorSource::Vgg19 { path: p.clone() };
    }
    if let Some(t) = &args.taps {
        cfg.taps = t.clone();
    }
    if let Some(l) = &args.lambdas {
        cfg.lambdas = l.clone();
    }
    cfg
}

/// Runs one command and returns its stdout summary.
pub fn run(cli: Cli) -> CliResult<Value> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    match cli.command {
        Command::Dataset { command: DatasetCommand::Build(a) } => dataset_build(a, file, seed),
        Command::Train(a) => train_cmd(a, file, seed),
        Command::Evaluate(a) => evaluate_cmd(a, file),
        Command::Predict(a) => predict_cmd(a, file),
        Command::Drag(a) => drag_cmd(a, file),
        Command::Diagnose { command: DiagnoseCommand::Latents(a) } => diagnose_cmd(a, file, seed),
        Command::Serve(a) => serve_cmd(a, file),
    }
}

pub fn dataset_plan(a: &DatasetArgs, f: &config::DatasetFile) -> CliResult<DatasetPlan> {
    let mut plan = DatasetPlan::desk_default();
    if let Some(r) = a.resolution.or(f.resolution) {
        plan.resolution = r;
    }
    if let Some(s) = &f.sampling {
        plan.sampling = s.clone();
    }
    if let Some(counts) = &a.grid {
        plan.sampling = Sampling::Grid { counts: counts.clone() };
    } else if a.count.is_some() || a.vary_vis {
        let (count, vary) = match &plan.sampling {
            Sampling::Random { count, vary_vis } => (*count, *vary_vis),
            Sampling::Grid { counts } => (counts.iter().product(), false),
        };
        plan.sampling = Sampling::Random { count: a.count.unwrap_or(count), vary_vis: a.vary_vis || vary };
    }
    if let Some(t) = a.test_count.or(f.test_count) {
        plan.test_count = t;
    }
    plan.field = match &a.field {
        Some(text) => parse_json(text, "--field")?,
        None => f.field.clone().unwrap_or_default(),
    };
    plan.colormap = match &a.colormap {
        Some(text) => parse_json(text, "--colormap")?,
        None => f.colormap.clone().unwrap_or_default(),
    };
    Ok(plan)
}

fn dataset_build(a: DatasetArgs, file: FileConfig, seed: u64) -> CliResult<Value> {
    let f = &file.dataset;
    let out = required(a.out.clone().or(f.out.clone()), "out")?;
    let spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            parse_json(&text, "--spec")?
        }
        None => f.spec.clone().unwrap_or_else(ParameterSpec::synthetic),
    };
    let plan = dataset_plan(&a, f)?;
    let manifest = build_dataset(&spec, &plan, &out, seed)?;
    Ok(json!({
        "manifest": out.join(surrogate_core::synthdata::MANIFEST_FILE),
        "train": manifest.count(Split::Train),
        "test": manifest.count(Split::Test),
        "seed": seed,
    }))
}

pub fn generator_config(manifest: &DatasetManifest, a: &GeneratorArgs, f: &config::GeneratorFile) -> CliResult<GeneratorConfig> {
    let mut g = GeneratorConfig::new(manifest.spec.sim_dim(), manifest.spec.vis_dim(), manifest.resolution()?);
    if let Some(v) = a.hidden.or(f.hidden) {
        g.hidden = v;
    }
    if let Some(v) = a.mapping_depth.or(f.mapping_depth) {
        g.mapping_depth = v;
    }
    if let Some(v) = a.base_channels.or(f.base_channels) {
        g.base_channels = v;
    }
    if let Some(v) = a.min_channels.or(f.min_channels) {
        g.min_channels = v;
    }
    if let Some(v) = a.convs_per_block.or(f.convs_per_block) {
        g.convs_per_block = v;
    }
    Ok(g)
}

pub fn train_config(a: &TrainArgs, f: &config::TrainFile, seed: u64) -> TrainConfig {
    let mut c = TrainConfig { seed, ..TrainConfig::default() };
    if let Some(v) = a.epochs.or(f.epochs) {
        c.epochs = v;
    }
    if let Some(v) = a.batch_size.or(f.batch_size) {
        c.batch_size = v;
    }
    if let Some(v) = a.learning_rate.or(f.learning_rate) {
        c.learning_rate = v;
    }
    c.schedule = match a.schedule {
        Some(ScheduleArg::Constant) => LrSchedule::Constant,
        Some(ScheduleArg::Cosine) => LrSchedule::Cosine,
        None => f.schedule.unwrap_or_default(),
    };
    let mut w: LossWeights = f.weights.unwrap_or_default();
    if let Some(v) = a.alpha {
        w.alpha = v;
    }
    if let Some(v) = a.beta {
        w.beta = v;
    }
    if let Some(v) = a.gamma {
        w.gamma = v;
    }
    match a.reduction {
        Some(ReductionArg::Mean) => w.reduction = Reduction::Mean,
        Some(ReductionArg::Sum) => w.reduction = Reduction::Sum,
        None => {}
    }
    c.weights = w;
    c.perceptual = perceptual(&a.perceptual, f.perceptual.clone());
    if let Some(v) = a.checkpoint_every.or(f.checkpoint_every) {
        c.checkpoint_every = v;
    }
    if let Some(v) = a.device.clone().or(f.device.clone()) {
        c.device = v;
    }
    c
}

fn train_cmd(a: TrainArgs, file: FileConfig, seed: u64) -> CliResult<Value> {
    let f = &file.train;
    let manifest = load_manifest(&required(a.manifest.clone().or(f.manifest.clone()), "manifest")?)?;
    let out = required(a.out.clone().or(f.out.clone()), "out")?;
    let gen = generator_config(&manifest, &a.generator, &file.generator)?;
    let config = train_config(&a, f, seed);
    let outcome = train_with(&manifest, &gen, &config, Some(&out), |rec| {
        tracing::info!(epoch = rec.epoch, total = rec.total, content = rec.content, "epoch done");
    })?;
    let path = out.join(MODEL_FILE);
    outcome.checkpoint.save(&path)?;
    Ok(json!({
        "checkpoint": path,
        "epochs": outcome.log.len(),
        "final_loss": outcome.log.last().map(|r| r.total),
        "seed": seed,
    }))
}

fn evaluate_cmd(a: EvaluateArgs, file: FileConfig) -> CliResult<Value> {
    let f = &file.evaluate;
    let ckpt = Checkpoint::load(&required(a.checkpoint.clone().or(f.checkpoint.clone()), "checkpoint")?)?;
    let manifest = load_manifest(&required(a.manifest.clone().or(f.manifest.clone()), "manifest")?)?;
    let split = match (a.split, f.split.as_deref()) {
        (Some(SplitArg::Train), _) | (None, Some("train")) => Split::Train,
        (Some(SplitArg::Test), _) | (None, Some("test")) | (None, None) => Split::Test,
        (None, Some(other)) => return Err(CliError::Validation(format!("unknown split `{other}`"))),
    };
    let extractor = FeatureExtractor::from_config(&perceptual(&a.perceptual, f.perceptual.clone()))?;
    let report = evaluate(&ckpt, &manifest, split, &extractor)?;
    let value = serde_json::to_value(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    match a.out.clone().or(f.out.clone()) {
        Some(path) => {
            write_json(&path, &report)?;
            Ok(json!({ "report": path, "mean_psnr": value["mean_psnr"], "mean_ssim": value["mean_ssim"] }))
        }
        None => Ok(value),
    }
}

fn predict_cmd(a: PredictArgs, file: FileConfig) -> CliResult<Value> {
    let f = &file.predict;
    let ckpt = Checkpoint::load(&required(a.checkpoint.clone().or(f.checkpoint.clone()), "checkpoint")?)?;
    let theta = theta_vector(&ckpt.model.spec, &required(a.theta.clone().or(f.theta.clone()), "theta")?)?;
    let out = required(a.out.clone().or(f.out.clone()), "out")?;
    ensure_parent(&out)?;
    ckpt.model.generate(&theta)?.save_png(&out)?;
    Ok(json!({ "image": out, "theta": theta.values().collect::<Vec<_>>() }))
}

/// Drag configuration from flags over file values over defaults.
pub fn drag_config(a: &DragArgs, f: &config::DragFile, spec: &ParameterSpec) -> CliResult<DragConfig> {
    let mut c = DragConfig::default();
    if let Some(v) = a.r_m.or(f.r_m) {
        c.r_m = v;
    }
    if let Some(v) = a.max_iters.or(f.max_iters) {
        c.max_iters = v;
    }
    if let Some(v) = a.step_size.or(f.step_size) {
        c.step_size = v;
    }
    if let Some(v) = a.disappearance_threshold.or(f.disappearance_threshold) {
        c.disappearance_threshold = v;
    }
    c.disappearance_window = match a.window {
        Some(WindowArg::Mean3x3) => DisappearanceWindow::Mean3x3,
        Some(WindowArg::Pixel) => DisappearanceWindow::Pixel,
        None => f.disappearance_window.unwrap_or(c.disappearance_window),
    };
    c.feature_layer = a.feature_layer.clone().or(f.feature_layer.clone());
    if let Some(v) = a.patch_dilation.or(f.patch_dilation) {
        c.patch_dilation = v;
    }
    let free = if a.free.is_empty() { f.free.clone().unwrap_or_default() } else { a.free.clone() };
    if !free.is_empty() {
        let mut mask = vec![false; spec.sim_dim()];
        for name in &free {
            match spec.sim.iter().position(|d| &d.name == name) {
                Some(i) => mask[i] = true,
                None => return Err(CliError::Validation(format!("`{name}` is not a simulation parameter"))),
            }
        }
        c.free_mask = mask;
    }
    Ok(c)
}

fn drag_cmd(a: DragArgs, file: FileConfig) -> CliResult<Value> {
    let f = &file.drag;
    let ckpt = Checkpoint::load(&required(a.checkpoint.clone().or(f.checkpoint.clone()), "checkpoint")?)?;
    let model = Arc::new(ckpt.model);
    let theta = theta_vector(&model.spec, &required(a.theta.clone().or(f.theta.clone()), "theta")?)?;
    let out = required(a.out.clone().or(f.out.clone()), "out")?;
    let selects = if a.select.is_empty() { f.select.clone().unwrap_or_default() } else { a.select.clone() };
    let targets = if a.target.is_empty() { f.target.clone().unwrap_or_default() } else { a.target.clone() };
    if selects.is_empty() || selects.len() != targets.len() {
        return Err(CliError::Validation(format!(
            "need one --target per --select (got {} and {})",
            selects.len(),
            targets.len()
        )));
    }
    let defaults = PatchOptions::default();
    let opts = PatchOptions {
        threshold: a.threshold.or(f.threshold).unwrap_or(defaults.threshold),
        radius: a.radius.or(f.radius).unwrap_or(defaults.radius),
        max_extent: a.max_extent.or(f.max_extent),
    };
    let config = drag_config(&a, f, &model.spec)?;
    let image = model.generate(&theta)?;
    let selections = selects
        .iter()
        .zip(&targets)
        .map(|(p, g)| Ok(select_patch(&image, *p, &opts)?.with_target(*g)))
        .collect::<CliResult<Vec<_>>>()?;
    let session = run_drag(model, theta, selections, config)?;
    session.export(&out)?;
    Ok(json!({
        "trajectory": out.join(surrogate_core::drag::TRAJECTORY_FILE),
        "status": session.status(),
        "steps": session.step_count(),
        "theta": session.theta().values().collect::<Vec<_>>(),
    }))
}

fn diagnose_cmd(a: DiagnoseArgs, file: FileConfig, seed: u64) -> CliResult<Value> {
    let f = &file.diagnose;
    let ckpt = Checkpoint::load(&required(a.checkpoint.clone().or(f.checkpoint.clone()), "checkpoint")?)?;
    let model: &Model = &ckpt.model;
    let spec = &model.spec;
    let mut groups = Vec::new();
    if let Some(path) = a.manifest.clone().or(f.manifest.clone()) {
        let manifest = load_manifest(&path)?;
        for (split, label) in [(Split::Train, GroupLabel::Train), (Split::Test, GroupLabel::Test)] {
            let params: Vec<_> = manifest.indices(split).iter().map(|&i| manifest.entries[i].params()).collect();
            if !params.is_empty() {
                groups.push(collect_latents(model, &params, label)?);
            }
        }
    }
    let in_range = a.in_range.or(f.in_range).unwrap_or(0);
    if in_range > 0 {
        groups.push(collect_latents(model, &sample_in_range(spec, in_range, seed), GroupLabel::InRange)?);
    }
    let outside = a.out_of_range.or(f.out_of_range).unwrap_or(100);
    if outside > 0 {
        let extent = a.extent.or(f.extent).unwrap_or(0.5);
        let params = sample_out_of_range(spec, outside, extent, seed.wrapping_add(1))?;
        groups.push(collect_latents(model, &params, GroupLabel::OutOfRange)?);
    }
    let report = validity_report(&groups)?;
    if let Some(plot) = a.plot.clone().or(f.plot.clone()) {
        ensure_parent(&plot)?;
        scatter_plot(&report, 512)?.save_png(&plot)?;
    }
    match a.out.clone().or(f.out.clone()) {
        Some(path) => {
            write_json(&path, &report)?;
            Ok(json!({ "report": path, "stress": report.stress, "neighbors": report.neighbors }))
        }
        None => serde_json::to_value(&report).map_err(|e| CliError::Runtime(e.to_string())),
    }
}

/// Service configuration: flags over environment over file over defaults.
pub fn serve_config(a: &ServeArgs, file: Option<ServiceConfig>, env: impl IntoIterator<Item = (String, String)>) -> CliResult<ServiceConfig> {
    let mut c = file.unwrap_or_default().with_env(env)?;
    if let Some(v) = &a.host {
        c.host = v.clone();
    }
    if let Some(v) = a.port {
        c.port = v;
    }
    if let Some(v) = &a.checkpoint_dir {
        c.checkpoint_dir = Some(v.clone());
    }
    if let Some(v) = a.idle_timeout_secs {
        c.idle_timeout_secs = v;
    }
    Ok(c)
}

fn serve_cmd(a: ServeArgs, file: FileConfig) -> CliResult<Value> {
    let config = serve_config(&a, file.serve, std::env::vars())?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(surrogate_service::serve(config.clone()))?;
    Ok(json!({ "stopped": format!("{}:{}", config.host, config.port) }))
}
