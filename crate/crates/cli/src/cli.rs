//! Argument parsing and subcommand dispatch.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use styleprompter::checkpoint::{load_checkpoint, save_checkpoint, CheckpointBundle};
use styleprompter::encoder::{complexity, AttentionKind};
use styleprompter::image_io::{load_png, save_png};
use styleprompter::latent_spaces::{dispersion, distance_to_w, DirectionCatalog, LatentCode};
use styleprompter::models::{ModelConfig, Models};
use styleprompter::pipeline::{self, MixMode};
use styleprompter::smart::{BetaWeights, Flow};
use styleprompter::training::{train, Dataset, LossPlugins, Stage, TrainConfig};
use styleprompter::{Error, Tensor};

use crate::service::{self, ServiceConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "styleprompter",
    version,
    about = "GAN inversion, editing and mixing"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a freshly initialized checkpoint.
    Init(InitArgs),
    /// Run one training stage on generator-sampled images.
    Train(TrainArgs),
    /// Invert an image and write the refined reconstruction.
    Invert(InvertArgs),
    /// Invert an image, move its code along a direction and resynthesize.
    Edit(EditArgs),
    /// Mix the inversions of two images.
    Mix(MixArgs),
    /// Dispersion and distance to W of latent codes.
    Metrics(MetricsArgs),
    /// Multiply-add count of an attention variant.
    Complexity(ComplexityArgs),
    /// Render an inversion or edit over a grid of refiner weights.
    BetaSweep(BetaSweepArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Model configuration JSON; defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub stage: Stage,
    /// Training job JSON.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint to continue from instead of a fresh initialization.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Per-step loss terms as CSV.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Args)]
pub struct BetaArgs {
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub beta1: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub beta2: f64,
}

impl BetaArgs {
    fn weights(self) -> styleprompter::Result<BetaWeights> {
        BetaWeights::new(self.beta1, self.beta2)
    }
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub beta: BetaArgs,
    #[arg(long)]
    pub baseline_out: Option<PathBuf>,
    #[arg(long)]
    pub latents_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Direction catalog JSON.
    #[arg(long)]
    pub directions: PathBuf,
    #[arg(long = "dir")]
    pub direction: String,
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: f64,
    #[command(flatten)]
    pub beta: BetaArgs,
    /// `[2][H][W]` JSON array of column and row offsets.
    #[arg(long)]
    pub flow: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MixArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub mode: MixMode,
    #[arg(long)]
    pub param: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Plain synthesis of the mixed code.
    #[arg(long)]
    pub no_smart: bool,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// A latent code or a JSON array of them.
    #[arg(long)]
    pub codes: PathBuf,
    /// W-space references, one per code.
    #[arg(long)]
    pub refs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ComplexityArgs {
    /// msa, w-msa or w-msa*.
    #[arg(long)]
    pub kind: AttentionKind,
    #[arg(long)]
    pub h: u64,
    #[arg(long)]
    pub w: u64,
    #[arg(long = "C")]
    pub c: u64,
    #[arg(long = "M", default_value_t = 0)]
    pub m: u64,
    #[arg(long = "T", default_value_t = 0)]
    pub t: u64,
}

#[derive(Debug, Args)]
pub struct BetaSweepArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Comma-separated β₁ values, also used for β₂ unless given.
    #[arg(
        long,
        value_delimiter = ',',
        required = true,
        allow_negative_numbers = true
    )]
    pub grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub grid2: Option<Vec<f64>>,
    /// Mosaic of all cells, β₁ down and β₂ across.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, requires_all = ["direction", "alpha"])]
    pub directions: Option<PathBuf>,
    #[arg(long = "dir", requires = "directions")]
    pub direction: Option<String>,
    #[arg(long, requires = "directions", allow_negative_numbers = true)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: PathBuf,
}

/// Contents of the `train --config` file. Keys of `train` override the
/// stage defaults one by one.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainJob {
    pub model: ModelConfig,
    pub init_seed: u64,
    pub dataset_size: Option<usize>,
    pub dataset_seed: u64,
    pub metric_seed: u64,
    pub train: Value,
}

impl TrainJob {
    pub fn train_config(&self, stage: Stage) -> styleprompter::Result<TrainConfig> {
        let mut base = serde_json::to_value(TrainConfig::for_stage(stage))?;
        if !self.train.is_null() {
            merge(&mut base, &self.train);
        }
        let mut cfg: TrainConfig = serde_json::from_value(base)?;
        cfg.stage = stage;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o.clone(),
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_usage() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

/// Parses `args` (program name first), runs the subcommand and returns the
/// exit code.
pub fn run_from<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    match run(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_USAGE
        }
        Err(CliError::Runtime(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_RUNTIME
        }
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> CliResult {
    match command {
        Command::Init(a) => init(a, out),
        Command::Train(a) => train_stage(a, out),
        Command::Invert(a) => invert(a),
        Command::Edit(a) => edit(a),
        Command::Mix(a) => mix(a),
        Command::Metrics(a) => metrics(a, out),
        Command::Complexity(a) => {
            let n = complexity(a.kind, a.h, a.w, a.c, a.m, a.t)?;
            writeln!(out, "{n}")?;
            Ok(())
        }
        Command::BetaSweep(a) => beta_sweep(a),
        Command::Serve(a) => serve(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let bytes =
        fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn load_image(path: &Path) -> Result<Tensor, CliError> {
    load_png(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load_models(path: &Path) -> Result<Models, CliError> {
    styleprompter::checkpoint::load_models(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn find_direction(
    catalog: &Path,
    name: &str,
) -> Result<styleprompter::latent_spaces::EditDirection, CliError> {
    let catalog: DirectionCatalog = read_json(catalog)?;
    catalog
        .get(name)
        .cloned()
        .ok_or_else(|| CliError::Usage(format!("unknown direction `{name}`")))
}

fn init(a: InitArgs, out: &mut dyn Write) -> CliResult {
    let config = match &a.config {
        Some(p) => read_json(p)?,
        None => ModelConfig::default(),
    };
    let models = Models::init(config, a.seed)?;
    save_checkpoint(
        &CheckpointBundle::from_models(&models, Some(a.seed)),
        &a.out,
    )?;
    writeln!(
        out,
        "wrote {} ({} tensors)",
        a.out.display(),
        models.params.len()
    )?;
    Ok(())
}

fn train_stage(a: TrainArgs, out: &mut dyn Write) -> CliResult {
    let job: TrainJob = read_json(&a.config)?;
    let cfg = job.train_config(a.stage)?;
    let mut bundle = match &a.ckpt {
        Some(p) => {
            load_checkpoint(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?
        }
        None => CheckpointBundle::from_models(
            &Models::init(job.model.clone(), job.init_seed)?,
            Some(job.init_seed),
        ),
    };
    let manifest = bundle.manifest.clone();
    let mut models = bundle.into_models()?;
    let data = Dataset::from_generator(&models, job.dataset_size.unwrap_or(64), job.dataset_seed)?;
    let plugins = LossPlugins::random(models.config.generator.output_size, job.metric_seed);
    let report = train(&mut models, &data, &cfg, &plugins)?;
    if let Some(p) = &a.loss_csv {
        fs::write(p, report.to_csv())?;
    }
    bundle = CheckpointBundle::from_models(&models, manifest.seed);
    bundle.manifest.stages = manifest.stages;
    bundle.manifest.stages.push(stage_name(a.stage));
    save_checkpoint(&bundle, &a.out)?;
    writeln!(
        out,
        "{} steps{}, smoothed loss {:.6} -> {:.6}",
        report.records.len(),
        if report.stopped_early {
            " (plateau)"
        } else {
            ""
        },
        report.initial_smoothed(),
        report.final_smoothed()
    )?;
    Ok(())
}

fn stage_name(stage: Stage) -> String {
    serde_json::to_value(stage)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn invert(a: InvertArgs) -> CliResult {
    let models = load_models(&a.ckpt)?;
    let image = load_image(&a.input)?;
    let r = pipeline::invert(&models, &image, a.beta.weights()?)?;
    save_png(&r.image_refined.tensor, &a.out)?;
    if let Some(p) = &a.baseline_out {
        save_png(&r.image_baseline.tensor, p)?;
    }
    if let Some(p) = &a.latents_out {
        fs::write(p, serde_json::to_vec(&r.w_inv).map_err(Error::from)?)?;
    }
    Ok(())
}

fn read_flow(path: &Path) -> Result<Flow, CliError> {
    let nested: Vec<Vec<Vec<f64>>> = read_json(path)?;
    let h = nested.first().map_or(0, Vec::len);
    let w = nested.first().and_then(|c| c.first()).map_or(0, Vec::len);
    if nested
        .iter()
        .any(|c| c.len() != h || c.iter().any(|r| r.len() != w))
    {
        return Err(CliError::Usage("flow rows have unequal lengths".into()));
    }
    let data: Vec<f64> = nested.into_iter().flatten().flatten().collect();
    let t = Tensor::new(vec![data.len() / (h * w).max(1), h, w], data)?;
    Ok(Flow::from_tensor(&t)?)
}

fn edit(a: EditArgs) -> CliResult {
    let models = load_models(&a.ckpt)?;
    let image = load_image(&a.input)?;
    let dir = find_direction(&a.directions, &a.direction)?;
    let flow = a.flow.as_deref().map(read_flow).transpose()?;
    let beta = a.beta.weights()?;
    let inv = pipeline::invert(&models, &image, beta)?;
    let img = match &flow {
        Some(f) => pipeline::pose_edit(&models, &inv, &dir, a.alpha, f, beta)?,
        None => pipeline::edit(&models, &inv, &dir, a.alpha, beta)?,
    };
    save_png(&img.tensor, &a.out)?;
    Ok(())
}

fn mix(a: MixArgs) -> CliResult {
    let models = load_models(&a.ckpt)?;
    let s = pipeline::invert(&models, &load_image(&a.source)?, BetaWeights::ONE)?;
    let r = pipeline::invert(&models, &load_image(&a.reference)?, BetaWeights::ONE)?;
    let img = pipeline::mix(&models, &s, &r, a.mode, a.param, !a.no_smart)?;
    save_png(&img.tensor, &a.out)?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Codes {
    Many(Vec<LatentCode>),
    One(LatentCode),
}

impl Codes {
    fn into_vec(self) -> Vec<LatentCode> {
        match self {
            Codes::Many(v) => v,
            Codes::One(c) => vec![c],
        }
    }
}

fn metrics(a: MetricsArgs, out: &mut dyn Write) -> CliResult {
    let codes = read_json::<Codes>(&a.codes)?.into_vec();
    writeln!(out, "dispersion {:?}", dispersion(&codes)?)?;
    if let Some(p) = &a.refs {
        let refs = read_json::<Codes>(p)?.into_vec();
        writeln!(out, "distance_to_w {:?}", distance_to_w(&codes, &refs)?)?;
    }
    Ok(())
}

fn beta_sweep(a: BetaSweepArgs) -> CliResult {
    let models = load_models(&a.ckpt)?;
    let image = load_image(&a.input)?;
    let dir = match (&a.directions, &a.direction) {
        (Some(p), Some(n)) => Some(find_direction(p, n)?),
        _ => None,
    };
    let inv = pipeline::invert(&models, &image, BetaWeights::ONE)?;
    let grid2 = a.grid2.as_ref().unwrap_or(&a.grid);
    let edit = dir.as_ref().map(|d| (d, a.alpha.unwrap_or(0.0)));
    let grid = pipeline::beta_sweep(&models, &inv, edit, &a.grid, grid2)?;
    save_png(&grid.mosaic(), &a.out)?;
    Ok(())
}

fn serve(a: ServeArgs) -> CliResult {
    let mut cfg: ServiceConfig = read_json(&a.config)?;
    cfg.apply_env(|k| std::env::var(k).ok());
    cfg.validate()?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(cfg))?;
    Ok(())
}
