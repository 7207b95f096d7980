//! Command-line pipeline: train a denoiser, sample reverse trajectories,
//! compute trajectory/drift metrics, and render figures. Every stage draws
//! its randomness from one root seed through fixed per-stage derivations, so
//! each command is independently reproducible.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::dataset;
use crate::diffusion::{self, LossCurve, TrainConfig, TrajectoryBundle};
use crate::driftfield::{self, AlignmentCurve, DriftField, FieldKind, Grid2D};
use crate::model::{self, DenoiserModel, EmbeddingConfig, InputMode, TimeMode};
use crate::plots::{self, FigureInputs};
use crate::trajmetrics::{self, DisplacementResult, VelocityCurve, HISTOGRAM_BINS};
use crate::{derive_seed, stages, Error, Point, Result};

/// Top of the linear alpha schedule, fixed for every configuration.
pub const ALPHA_MAX: f64 = 0.9999;

pub const MODEL_FILE: &str = "model.txt";
pub const LOSS_FILE: &str = "loss_epoch.csv";
pub const MSE_FILE: &str = "mse_per_timestep.csv";
pub const TRAJECTORY_FILE: &str = "trajectories.csv";
pub const DISPLACEMENT_FILE: &str = "displacement.csv";
pub const VELOCITY_FILE: &str = "velocity.csv";
pub const CLUSTERS_FILE: &str = "clusters.csv";
pub const ALIGNMENT_FILE: &str = "alignment.csv";
pub const FORWARD_FIELD_FILE: &str = "forward_field.csv";
pub const BACKWARD_FIELD_FILE: &str = "backward_field.csv";
pub const METRICS_FILE: &str = "metrics.txt";

/// The four trained model configurations, named input-time-alpha_min.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigName {
    IdentityZero95,
    FourierLinear95,
    FourierFourier95,
    FourierFourier98,
}

impl ConfigName {
    pub const ALL: [ConfigName; 4] = [
        ConfigName::IdentityZero95,
        ConfigName::FourierLinear95,
        ConfigName::FourierFourier95,
        ConfigName::FourierFourier98,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConfigName::IdentityZero95 => "identity-zero-0.95",
            ConfigName::FourierLinear95 => "fourier-linear-0.95",
            ConfigName::FourierFourier95 => "fourier-fourier-0.95",
            ConfigName::FourierFourier98 => "fourier-fourier-0.98",
        }
    }

    /// Input embedding, time embedding, and schedule floor for this name.
    pub fn modes(self) -> (InputMode, TimeMode, f64) {
        match self {
            ConfigName::IdentityZero95 => (InputMode::Identity, TimeMode::Zero, 0.95),
            ConfigName::FourierLinear95 => (InputMode::Fourier, TimeMode::Linear, 0.95),
            ConfigName::FourierFourier95 => (InputMode::Fourier, TimeMode::Fourier, 0.95),
            ConfigName::FourierFourier98 => (InputMode::Fourier, TimeMode::Fourier, 0.98),
        }
    }
}

impl fmt::Display for ConfigName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConfigName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        ConfigName::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = ConfigName::ALL.iter().map(|c| c.as_str()).collect();
                format!("unknown config name `{s}`; valid names: {}", names.join(", "))
            })
    }
}

/// Evaluation grid: resolution, data margin, and optional explicit bounds
/// (x_min, x_max, y_min, y_max) that override the data-covering default.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub margin: f64,
    pub bounds: Option<(f64, f64, f64, f64)>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { nx: 20, ny: 20, margin: 0.5, bounds: None }
    }
}

/// Fully resolved settings for one pipeline run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub config: ConfigName,
    pub t_max: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub n_samples: usize,
    pub k: usize,
    pub grid: GridSpec,
    /// Timesteps at which drift fields are dumped; always within 1..=t_max.
    pub field_timesteps: Vec<usize>,
    pub seed: u64,
    pub out: PathBuf,
}

impl RunConfig {
    /// Stem of the dataset file, used to name the per-run directory.
    pub fn dataset_name(&self) -> String {
        self.dataset
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".to_string())
    }

    /// Directory holding every artifact of this dataset/config pair.
    pub fn run_dir(&self) -> PathBuf {
        self.out.join(self.dataset_name()).join(self.config.as_str())
    }
}

/// Field-dump timesteps when none are configured: 1 and the quarter points.
pub fn default_field_steps(t_max: usize) -> Vec<usize> {
    let mut steps = vec![
        1,
        t_max.div_ceil(4),
        t_max.div_ceil(2),
        (3 * t_max).div_ceil(4),
        t_max,
    ];
    steps.dedup();
    steps
}

#[derive(Parser, Debug)]
#[command(
    name = "injected",
    version,
    about = "Denoising diffusion on 2D point clouds: train, sample, analyze, plot"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Train a denoiser; writes the model file and loss curves.
    Train(RunArgs),
    /// Sample reverse-process trajectories from a trained model.
    Sample(RunArgs),
    /// Compute displacement, velocity, clusters, fidelity, fields, alignment.
    Analyze(RunArgs),
    /// Render the SVG figure set from analysis outputs.
    Plot(RunArgs),
    /// Run train, sample, analyze, and plot in sequence.
    All(RunArgs),
}

/// Shared flags. Values omitted here fall back to the config file, then to
/// built-in defaults; flags always win over the file.
#[derive(Args, Debug, Default, Clone)]
pub struct RunArgs {
    /// Flat key=value config file mirroring the run settings.
    #[arg(long, value_name = "FILE")]
    pub config_file: Option<PathBuf>,
    /// Dataset CSV with one x,y point per row.
    #[arg(long, value_name = "FILE")]
    pub dataset: Option<PathBuf>,
    /// Model configuration name (see `train --help` for the four names).
    #[arg(long, value_name = "NAME")]
    pub config: Option<String>,
    /// Root seed; every stage derives its own stream from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Number of reverse-process samples.
    #[arg(long, value_name = "N")]
    pub samples: Option<usize>,
    /// Output root; artifacts land in <out>/<dataset>/<config>/.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Drift-field grid resolution, e.g. 20x20.
    #[arg(long, value_name = "NXxNY")]
    pub grid: Option<String>,
    /// Cluster count for trajectory K-means.
    #[arg(long)]
    pub k: Option<usize>,
}

/// Pending values gathered from the config file and flags, before defaults.
#[derive(Debug, Default)]
struct Overrides {
    dataset: Option<PathBuf>,
    config: Option<ConfigName>,
    t_max: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    clip_norm: Option<f64>,
    samples: Option<usize>,
    k: Option<usize>,
    grid: Option<(usize, usize)>,
    grid_margin: Option<f64>,
    grid_bounds: Option<(f64, f64, f64, f64)>,
    field_timesteps: Option<Vec<usize>>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

type UsageResult<T> = std::result::Result<T, String>;

fn parse_num<T: FromStr>(key: &str, value: &str) -> UsageResult<T> {
    value
        .trim()
        .parse()
        .map_err(|_| format!("invalid value `{value}` for `{key}`"))
}

fn parse_grid(value: &str) -> UsageResult<(usize, usize)> {
    let err = || format!("invalid grid `{value}`; expected NXxNY, e.g. 20x20");
    let (a, b) = value.split_once(['x', 'X']).ok_or_else(err)?;
    let nx: usize = a.trim().parse().map_err(|_| err())?;
    let ny: usize = b.trim().parse().map_err(|_| err())?;
    Ok((nx, ny))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> UsageResult<Vec<T>> {
    value
        .split(',')
        .map(|part| parse_num(key, part))
        .collect()
}

fn parse_bounds(value: &str) -> UsageResult<(f64, f64, f64, f64)> {
    let v: Vec<f64> = parse_list("grid_bounds", value)?;
    if v.len() != 4 {
        return Err(format!(
            "grid_bounds needs four comma-separated numbers (x_min,x_max,y_min,y_max), got {}",
            v.len()
        ));
    }
    Ok((v[0], v[1], v[2], v[3]))
}

const CONFIG_KEYS: &str = "dataset, config, t_max, epochs, batch_size, learning_rate, \
clip_norm, samples, k, grid, grid_margin, grid_bounds, field_timesteps, seed, out";

fn apply_config_file(path: &Path, o: &mut Overrides) -> UsageResult<()> {
    let text = fs::read_to_string(path)
        .map_err(|e| format!("config file {}: {e}", path.display()))?;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = |msg: String| format!("config file {}:{}: {msg}", path.display(), idx + 1);
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| at(format!("expected key=value, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "dataset" => o.dataset = Some(PathBuf::from(value)),
            "config" => o.config = Some(value.parse().map_err(at)?),
            "t_max" => o.t_max = Some(parse_num(key, value).map_err(at)?),
            "epochs" => o.epochs = Some(parse_num(key, value).map_err(at)?),
            "batch_size" => o.batch_size = Some(parse_num(key, value).map_err(at)?),
            "learning_rate" => o.learning_rate = Some(parse_num(key, value).map_err(at)?),
            "clip_norm" => o.clip_norm = Some(parse_num(key, value).map_err(at)?),
            "samples" => o.samples = Some(parse_num(key, value).map_err(at)?),
            "k" => o.k = Some(parse_num(key, value).map_err(at)?),
            "grid" => o.grid = Some(parse_grid(value).map_err(at)?),
            "grid_margin" => o.grid_margin = Some(parse_num(key, value).map_err(at)?),
            "grid_bounds" => o.grid_bounds = Some(parse_bounds(value).map_err(at)?),
            "field_timesteps" => {
                o.field_timesteps = Some(parse_list(key, value).map_err(at)?)
            }
            "seed" => o.seed = Some(parse_num(key, value).map_err(at)?),
            "out" => o.out = Some(PathBuf::from(value)),
            other => {
                return Err(at(format!("unknown key `{other}`; known keys: {CONFIG_KEYS}")))
            }
        }
    }
    Ok(())
}

/// Merge defaults, config file, and flags (in rising precedence) and check
/// every setting once, so the commands can assume a coherent configuration.
pub fn resolve(args: &RunArgs) -> UsageResult<RunConfig> {
    let mut o = Overrides::default();
    if let Some(path) = &args.config_file {
        apply_config_file(path, &mut o)?;
    }
    if let Some(v) = &args.dataset {
        o.dataset = Some(v.clone());
    }
    if let Some(v) = &args.config {
        o.config = Some(v.parse()?);
    }
    if let Some(v) = args.seed {
        o.seed = Some(v);
    }
    if let Some(v) = args.epochs {
        o.epochs = Some(v);
    }
    if let Some(v) = args.samples {
        o.samples = Some(v);
    }
    if let Some(v) = &args.out {
        o.out = Some(v.clone());
    }
    if let Some(v) = &args.grid {
        o.grid = Some(parse_grid(v)?);
    }
    if let Some(v) = args.k {
        o.k = Some(v);
    }

    let dataset = o
        .dataset
        .ok_or("missing dataset: pass --dataset or set `dataset` in the config file")?;
    if dataset.file_stem().is_none_or(|s| s.is_empty()) {
        return Err(format!("dataset path `{}` has no file name", dataset.display()));
    }
    let t_max = o.t_max.unwrap_or(50);
    if t_max < 1 {
        return Err("t_max must be at least 1".to_string());
    }
    let field_timesteps = match o.field_timesteps {
        Some(steps) => {
            if steps.is_empty() {
                return Err("field_timesteps must not be empty".to_string());
            }
            if let Some(bad) = steps.iter().find(|&&t| t < 1 || t > t_max) {
                return Err(format!("field timestep {bad} outside 1..={t_max}"));
            }
            steps
        }
        None => default_field_steps(t_max),
    };
    let default_grid = GridSpec::default();
    let (nx, ny) = o.grid.unwrap_or((default_grid.nx, default_grid.ny));
    if nx < 2 || ny < 2 {
        return Err(format!("grid must be at least 2x2, got {nx}x{ny}"));
    }
    let margin = o.grid_margin.unwrap_or(default_grid.margin);
    if !margin.is_finite() || margin < 0.0 {
        return Err(format!("grid_margin must be finite and non-negative, got {margin}"));
    }
    if let Some((x0, x1, y0, y1)) = o.grid_bounds {
        if !(x0 < x1 && y0 < y1) {
            return Err(format!(
                "grid_bounds must satisfy x_min < x_max and y_min < y_max, got {x0},{x1},{y0},{y1}"
            ));
        }
    }
    let positive = |name: &str, v: f64| {
        if v.is_finite() && v > 0.0 {
            Ok(v)
        } else {
            Err(format!("{name} must be positive, got {v}"))
        }
    };
    let at_least_one = |name: &str, v: usize| {
        if v >= 1 {
            Ok(v)
        } else {
            Err(format!("{name} must be at least 1"))
        }
    };

    Ok(RunConfig {
        dataset,
        config: o.config.unwrap_or(ConfigName::FourierFourier95),
        t_max,
        epochs: o.epochs.unwrap_or(2000),
        batch_size: at_least_one("batch_size", o.batch_size.unwrap_or(32))?,
        learning_rate: positive("learning_rate", o.learning_rate.unwrap_or(4e-4))?,
        clip_norm: positive("clip_norm", o.clip_norm.unwrap_or(1.0))?,
        n_samples: at_least_one("samples", o.samples.unwrap_or(1000))?,
        k: at_least_one("k", o.k.unwrap_or(5))?,
        grid: GridSpec { nx, ny, margin, bounds: o.grid_bounds },
        field_timesteps,
        seed: o.seed.unwrap_or(42),
        out: o.out.unwrap_or_else(|| PathBuf::from("out")),
    })
}

/// A pipeline failure tagged with the stage that produced it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub source: Error,
}

type StageResult<T> = std::result::Result<T, StageError>;

trait Staged<T> {
    fn stage(self, name: &'static str) -> StageResult<T>;
}

impl<T> Staged<T> for Result<T> {
    fn stage(self, name: &'static str) -> StageResult<T> {
        self.map_err(|source| StageError { stage: name, source })
    }
}

/// Parse the command line and run it; returns the process exit code
/// (0 success, 1 usage error, 2 pipeline error).
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let args = match &cli.command {
        Cmd::Train(a) | Cmd::Sample(a) | Cmd::Analyze(a) | Cmd::Plot(a) | Cmd::All(a) => a,
    };
    let cfg = match resolve(args) {
        Ok(cfg) => cfg,
        Err(msg) => {
            eprintln!("injected: error: {msg}");
            return 1;
        }
    };
    let result = match cli.command {
        Cmd::Train(_) => cmd_train(&cfg),
        Cmd::Sample(_) => cmd_sample(&cfg),
        Cmd::Analyze(_) => cmd_analyze(&cfg),
        Cmd::Plot(_) => cmd_plot(&cfg),
        Cmd::All(_) => cmd_all(&cfg),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("injected: {}: {}", e.stage, e.source);
            2
        }
    }
}

fn ensure_run_dir(cfg: &RunConfig) -> StageResult<PathBuf> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)
        .map_err(|e| Error::io(&dir, e))
        .stage("write-outputs")?;
    Ok(dir)
}

fn announce(path: &Path) {
    println!("wrote {}", path.display());
}

fn cmd_train(cfg: &RunConfig) -> StageResult<()> {
    let dir = ensure_run_dir(cfg)?;
    let raw = dataset::load_csv(&cfg.dataset).stage("load-dataset")?;
    let (cloud, _stats) = dataset::normalize(&raw).stage("normalize")?;
    let split = dataset::replicate_and_split(&cloud, 6, 0.9, derive_seed(cfg.seed, stages::SPLIT))
        .stage("split")?;
    let (input_mode, time_mode, alpha_min) = cfg.config.modes();
    let schedule =
        diffusion::build_schedule(cfg.t_max, alpha_min, ALPHA_MAX).stage("schedule")?;
    let mut net = DenoiserModel::new(
        EmbeddingConfig::new(input_mode, time_mode),
        derive_seed(cfg.seed, stages::MODEL_INIT),
    );
    let train_config = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        clip_norm: cfg.clip_norm,
        seed: derive_seed(cfg.seed, stages::TRAIN),
    };
    let curve = diffusion::train(&mut net, &split, &schedule, &train_config).stage("train")?;

    let model_path = dir.join(MODEL_FILE);
    model::save_model(&net, cfg.t_max, alpha_min, &model_path).stage("save-model")?;
    announce(&model_path);
    write_loss(&dir.join(LOSS_FILE), &curve).stage("write-outputs")?;
    announce(&dir.join(LOSS_FILE));
    write_mse(&dir.join(MSE_FILE), &curve).stage("write-outputs")?;
    announce(&dir.join(MSE_FILE));
    Ok(())
}

fn cmd_sample(cfg: &RunConfig) -> StageResult<()> {
    let dir = ensure_run_dir(cfg)?;
    let (net, t_max, alpha_min) = model::load_model(&dir.join(MODEL_FILE)).stage("load-model")?;
    let schedule = diffusion::build_schedule(t_max, alpha_min, ALPHA_MAX).stage("schedule")?;
    let mut bundle = diffusion::sample(
        &net,
        &schedule,
        cfg.n_samples,
        derive_seed(cfg.seed, stages::SAMPLE),
        true,
    )
    .stage("sample")?;
    bundle.config_tag = cfg.config.as_str().to_string();
    let path = dir.join(TRAJECTORY_FILE);
    write_trajectories(&path, &bundle).stage("write-outputs")?;
    announce(&path);
    Ok(())
}

fn cmd_analyze(cfg: &RunConfig) -> StageResult<()> {
    let dir = ensure_run_dir(cfg)?;
    let bundle = read_trajectories(&dir.join(TRAJECTORY_FILE)).stage("load-trajectories")?;
    let (net, t_max, alpha_min) = model::load_model(&dir.join(MODEL_FILE)).stage("load-model")?;
    if bundle.t_max != t_max {
        return Err(Error::InvalidArgument(format!(
            "trajectory file has t_max={} but model file has t_max={}",
            bundle.t_max, t_max
        )))
        .stage("analyze");
    }
    let schedule = diffusion::build_schedule(t_max, alpha_min, ALPHA_MAX).stage("schedule")?;
    let raw = dataset::load_csv(&cfg.dataset).stage("load-dataset")?;
    let (cloud, _stats) = dataset::normalize(&raw).stage("normalize")?;

    let disp = trajmetrics::displacement(&bundle).stage("metrics")?;
    write_displacement(&dir.join(DISPLACEMENT_FILE), &disp).stage("write-outputs")?;
    announce(&dir.join(DISPLACEMENT_FILE));

    let vel = trajmetrics::velocity(&bundle).stage("metrics")?;
    write_velocity(&dir.join(VELOCITY_FILE), &vel).stage("write-outputs")?;
    announce(&dir.join(VELOCITY_FILE));

    let clusters =
        trajmetrics::cluster_trajectories(&bundle, cfg.k, derive_seed(cfg.seed, stages::CLUSTER))
            .stage("metrics")?;
    write_clusters(&dir.join(CLUSTERS_FILE), &clusters.labels).stage("write-outputs")?;
    announce(&dir.join(CLUSTERS_FILE));

    let fidelity =
        trajmetrics::wasserstein_fidelity(&cloud.points, &bundle.final_points()).stage("metrics")?;

    let grid = match cfg.grid.bounds {
        Some((x0, x1, y0, y1)) => Grid2D::new(x0, x1, y0, y1, cfg.grid.nx, cfg.grid.ny),
        None => Grid2D::covering(&cloud.points, cfg.grid.margin, cfg.grid.nx, cfg.grid.ny),
    }
    .stage("fields")?;
    let mut forward_fields = Vec::with_capacity(cfg.field_timesteps.len());
    let mut dumped_backward = Vec::with_capacity(cfg.field_timesteps.len());
    for &t in &cfg.field_timesteps {
        forward_fields
            .push(driftfield::forward_drift(&grid, t, &cloud.points, &schedule).stage("fields")?);
        dumped_backward
            .push(driftfield::backward_drift(&grid, t, &net, &schedule).stage("fields")?);
    }
    write_fields(&dir.join(FORWARD_FIELD_FILE), &forward_fields).stage("write-outputs")?;
    announce(&dir.join(FORWARD_FIELD_FILE));
    write_fields(&dir.join(BACKWARD_FIELD_FILE), &dumped_backward).stage("write-outputs")?;
    announce(&dir.join(BACKWARD_FIELD_FILE));

    // Alignment wants one backward field per transition, noisiest first.
    let mut all_backward = Vec::with_capacity(t_max);
    for t in (1..=t_max).rev() {
        all_backward.push(driftfield::backward_drift(&grid, t, &net, &schedule).stage("fields")?);
    }
    let alignment = driftfield::drift_alignment(&bundle, &all_backward).stage("alignment")?;
    write_alignment(&dir.join(ALIGNMENT_FILE), &alignment).stage("write-outputs")?;
    announce(&dir.join(ALIGNMENT_FILE));

    write_metrics(&dir.join(METRICS_FILE), &fidelity, &disp, &vel, &alignment, &clusters)
        .stage("write-outputs")?;
    announce(&dir.join(METRICS_FILE));
    Ok(())
}

fn cmd_plot(cfg: &RunConfig) -> StageResult<()> {
    let dir = ensure_run_dir(cfg)?;
    let mut bundle = read_trajectories(&dir.join(TRAJECTORY_FILE)).stage("plot")?;
    bundle.config_tag = cfg.config.as_str().to_string();
    let labels = read_clusters(&dir.join(CLUSTERS_FILE)).stage("plot")?;
    let alignment = read_alignment(&dir.join(ALIGNMENT_FILE)).stage("plot")?;
    let disp = read_displacement(&dir.join(DISPLACEMENT_FILE)).stage("plot")?;
    let vel = read_velocity(&dir.join(VELOCITY_FILE)).stage("plot")?;
    let forward_fields =
        read_fields(&dir.join(FORWARD_FIELD_FILE), FieldKind::Forward).stage("plot")?;
    let backward_fields =
        read_fields(&dir.join(BACKWARD_FIELD_FILE), FieldKind::Backward).stage("plot")?;
    let loss = read_loss(&dir.join(LOSS_FILE), &dir.join(MSE_FILE)).stage("plot")?;

    let dataset_name = cfg.dataset_name();
    let inputs = FigureInputs {
        dataset: &dataset_name,
        config: cfg.config.as_str(),
        bundle: &bundle,
        cluster_labels: &labels,
        alignment: &alignment,
        displacement: &disp,
        velocity: &vel,
        forward_fields: &forward_fields,
        backward_fields: &backward_fields,
        loss: &loss,
    };
    let written = plots::figure_bundle(&inputs, &cfg.out).stage("plot")?;
    for path in &written {
        announce(path);
    }
    Ok(())
}

fn cmd_all(cfg: &RunConfig) -> StageResult<()> {
    cmd_train(cfg)?;
    cmd_sample(cfg)?;
    cmd_analyze(cfg)?;
    cmd_plot(cfg)
}

// ---- file formats -------------------------------------------------------

/// 17 significant digits: enough to round-trip any f64 exactly.
fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

fn read_existing(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(Error::MissingInput(path.display().to_string()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Split a data line into exactly `n` comma-separated fields.
fn split_fields<'a>(line: &'a str, n: usize, path: &Path, lineno: usize) -> Result<Vec<&'a str>> {
    let parts: Vec<&str> = line.split(',').collect();
    if parts.len() != n {
        return Err(Error::parse(
            path,
            lineno,
            format!("expected {n} comma-separated fields, got {}", parts.len()),
        ));
    }
    Ok(parts)
}

fn parse_field<T: FromStr>(s: &str, what: &str, path: &Path, lineno: usize) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::parse(path, lineno, format!("invalid {what} `{s}`")))
}

/// Iterate data lines after insisting on the exact expected header.
fn data_lines<'a>(
    text: &'a str,
    header: &str,
    path: &Path,
) -> Result<impl Iterator<Item = (usize, &'a str)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(first) if first == header => {}
        _ => {
            return Err(Error::parse(path, 1, format!("expected header `{header}`")));
        }
    }
    Ok(lines
        .enumerate()
        .map(|(i, line)| (i + 2, line))
        .filter(|(_, line)| !line.trim().is_empty()))
}

fn write_trajectories(path: &Path, bundle: &TrajectoryBundle) -> Result<()> {
    let mut s = String::with_capacity(bundle.n_samples() * bundle.n_steps() * 64 + 16);
    s.push_str("sample,step,x,y\n");
    for (i, traj) in bundle.positions.iter().enumerate() {
        for (j, p) in traj.iter().enumerate() {
            let _ = writeln!(s, "{i},{j},{},{}", fmt_f(p.x), fmt_f(p.y));
        }
    }
    write_text(path, &s)
}

fn read_trajectories(path: &Path) -> Result<TrajectoryBundle> {
    let text = read_existing(path)?;
    let mut rows: Vec<(usize, usize, Point)> = Vec::new();
    for (lineno, line) in data_lines(&text, "sample,step,x,y", path)? {
        let f = split_fields(line, 4, path, lineno)?;
        let sample = parse_field(f[0], "sample index", path, lineno)?;
        let step = parse_field(f[1], "step index", path, lineno)?;
        let x = parse_field(f[2], "x coordinate", path, lineno)?;
        let y = parse_field(f[3], "y coordinate", path, lineno)?;
        rows.push((sample, step, Point::new(x, y)));
    }
    if rows.is_empty() {
        return Err(Error::parse(path, 1, "no trajectory rows"));
    }
    let n_samples = rows.iter().map(|r| r.0).max().unwrap() + 1;
    let n_steps = rows.iter().map(|r| r.1).max().unwrap() + 1;
    if n_samples.checked_mul(n_steps) != Some(rows.len()) {
        return Err(Error::parse(
            path,
            1,
            format!(
                "rows do not form a dense table: {} samples x {} steps needs {} rows, found {}",
                n_samples,
                n_steps,
                n_samples * n_steps,
                rows.len()
            ),
        ));
    }
    let mut positions = vec![vec![None; n_steps]; n_samples];
    for (sample, step, p) in rows {
        if positions[sample][step].replace(p).is_some() {
            return Err(Error::parse(
                path,
                1,
                format!("duplicate row for sample {sample}, step {step}"),
            ));
        }
    }
    let positions: Vec<Vec<Point>> = positions
        .into_iter()
        .map(|traj| traj.into_iter().map(|p| p.unwrap()).collect())
        .collect();
    Ok(TrajectoryBundle { positions, t_max: n_steps - 1, config_tag: String::new() })
}

fn write_loss(path: &Path, curve: &LossCurve) -> Result<()> {
    let mut s = String::from("epoch,loss\n");
    for (i, loss) in curve.epoch_loss.iter().enumerate() {
        let _ = writeln!(s, "{},{}", i + 1, fmt_f(*loss));
    }
    write_text(path, &s)
}

fn write_mse(path: &Path, curve: &LossCurve) -> Result<()> {
    let mut s = String::from("t,mse\n");
    for (i, mse) in curve.mse_per_timestep.iter().enumerate() {
        let _ = writeln!(s, "{},{}", i + 1, fmt_f(*mse));
    }
    write_text(path, &s)
}

fn read_loss(loss_path: &Path, mse_path: &Path) -> Result<LossCurve> {
    let text = read_existing(loss_path)?;
    let mut epoch_loss = Vec::new();
    for (lineno, line) in data_lines(&text, "epoch,loss", loss_path)? {
        let f = split_fields(line, 2, loss_path, lineno)?;
        let epoch: usize = parse_field(f[0], "epoch", loss_path, lineno)?;
        if epoch != epoch_loss.len() + 1 {
            return Err(Error::parse(
                loss_path,
                lineno,
                format!("epochs must run 1..; got {epoch}"),
            ));
        }
        epoch_loss.push(parse_field(f[1], "loss", loss_path, lineno)?);
    }
    let text = read_existing(mse_path)?;
    let mut mse_per_timestep = Vec::new();
    for (lineno, line) in data_lines(&text, "t,mse", mse_path)? {
        let f = split_fields(line, 2, mse_path, lineno)?;
        let t: usize = parse_field(f[0], "timestep", mse_path, lineno)?;
        if t != mse_per_timestep.len() + 1 {
            return Err(Error::parse(
                mse_path,
                lineno,
                format!("timesteps must run 1..; got {t}"),
            ));
        }
        mse_per_timestep.push(parse_field(f[1], "mse", mse_path, lineno)?);
    }
    Ok(LossCurve { epoch_loss, mse_per_timestep })
}

fn write_displacement(path: &Path, disp: &DisplacementResult) -> Result<()> {
    let mut s = String::from("sample,displacement\n");
    for (i, d) in disp.per_sample.iter().enumerate() {
        let _ = writeln!(s, "{i},{}", fmt_f(*d));
    }
    write_text(path, &s)
}

fn read_displacement(path: &Path) -> Result<DisplacementResult> {
    let text = read_existing(path)?;
    let mut per_sample = Vec::new();
    for (lineno, line) in data_lines(&text, "sample,displacement", path)? {
        let f = split_fields(line, 2, path, lineno)?;
        let sample: usize = parse_field(f[0], "sample index", path, lineno)?;
        if sample != per_sample.len() {
            return Err(Error::parse(
                path,
                lineno,
                format!("samples must run 0..; got {sample}"),
            ));
        }
        per_sample.push(parse_field(f[1], "displacement", path, lineno)?);
    }
    Ok(DisplacementResult { per_sample, histogram_bins: HISTOGRAM_BINS })
}

fn write_velocity(path: &Path, vel: &VelocityCurve) -> Result<()> {
    let mut s = String::from("step,velocity\n");
    for (i, v) in vel.per_step.iter().enumerate() {
        let _ = writeln!(s, "{i},{}", fmt_f(*v));
    }
    write_text(path, &s)
}

fn read_velocity(path: &Path) -> Result<VelocityCurve> {
    let text = read_existing(path)?;
    let mut per_step = Vec::new();
    for (lineno, line) in data_lines(&text, "step,velocity", path)? {
        let f = split_fields(line, 2, path, lineno)?;
        let step: usize = parse_field(f[0], "step index", path, lineno)?;
        if step != per_step.len() {
            return Err(Error::parse(path, lineno, format!("steps must run 0..; got {step}")));
        }
        per_step.push(parse_field(f[1], "velocity", path, lineno)?);
    }
    Ok(VelocityCurve { per_step })
}

fn write_clusters(path: &Path, labels: &[usize]) -> Result<()> {
    let mut s = String::from("sample,label\n");
    for (i, label) in labels.iter().enumerate() {
        let _ = writeln!(s, "{i},{label}");
    }
    write_text(path, &s)
}

fn read_clusters(path: &Path) -> Result<Vec<usize>> {
    let text = read_existing(path)?;
    let mut labels = Vec::new();
    for (lineno, line) in data_lines(&text, "sample,label", path)? {
        let f = split_fields(line, 2, path, lineno)?;
        let sample: usize = parse_field(f[0], "sample index", path, lineno)?;
        if sample != labels.len() {
            return Err(Error::parse(
                path,
                lineno,
                format!("samples must run 0..; got {sample}"),
            ));
        }
        labels.push(parse_field(f[1], "label", path, lineno)?);
    }
    Ok(labels)
}

/// One row per transition, noisiest timestep first; an empty `cs` field
/// records a transition where every sample was excluded.
fn write_alignment(path: &Path, curve: &AlignmentCurve) -> Result<()> {
    let mut s = String::from("t,cs,included,excluded\n");
    let n = curve.mean_cs.len();
    for i in 0..n {
        let cs = curve.mean_cs[i].map(fmt_f).unwrap_or_default();
        let _ = writeln!(s, "{},{cs},{},{}", n - i, curve.included[i], curve.excluded[i]);
    }
    write_text(path, &s)
}

fn read_alignment(path: &Path) -> Result<AlignmentCurve> {
    let text = read_existing(path)?;
    let mut mean_cs = Vec::new();
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    let mut rows: Vec<(usize, Option<f64>, usize, usize)> = Vec::new();
    for (lineno, line) in data_lines(&text, "t,cs,included,excluded", path)? {
        let f = split_fields(line, 4, path, lineno)?;
        let t: usize = parse_field(f[0], "timestep", path, lineno)?;
        let cs = if f[1].trim().is_empty() {
            None
        } else {
            Some(parse_field(f[1], "cosine similarity", path, lineno)?)
        };
        let inc = parse_field(f[2], "included count", path, lineno)?;
        let exc = parse_field(f[3], "excluded count", path, lineno)?;
        rows.push((t, cs, inc, exc));
    }
    let n = rows.len();
    for (i, (t, cs, inc, exc)) in rows.into_iter().enumerate() {
        if t != n - i {
            return Err(Error::parse(
                path,
                i + 2,
                format!("rows must cover t={n}..1 in descending order; got {t}"),
            ));
        }
        mean_cs.push(cs);
        included.push(inc);
        excluded.push(exc);
    }
    Ok(AlignmentCurve { mean_cs, included, excluded })
}

fn write_fields(path: &Path, fields: &[DriftField]) -> Result<()> {
    let mut s = String::from("t,node_x,node_y,vec_x,vec_y,magnitude\n");
    for field in fields {
        for idx in 0..field.grid.n_nodes() {
            let node = field.grid.node(idx);
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                field.t,
                fmt_f(node.x),
                fmt_f(node.y),
                fmt_f(field.vectors[idx].x),
                fmt_f(field.vectors[idx].y),
                fmt_f(field.magnitudes[idx]),
            );
        }
    }
    write_text(path, &s)
}

/// Rebuild fields from a dump. Nodes are stored row-major with y outermost,
/// so the leading run of equal-y rows gives the grid width.
fn read_fields(path: &Path, kind: FieldKind) -> Result<Vec<DriftField>> {
    let text = read_existing(path)?;
    let mut rows: Vec<(usize, Point, Point, f64)> = Vec::new();
    for (lineno, line) in data_lines(&text, "t,node_x,node_y,vec_x,vec_y,magnitude", path)? {
        let f = split_fields(line, 6, path, lineno)?;
        let t = parse_field(f[0], "timestep", path, lineno)?;
        let nx = parse_field(f[1], "node x", path, lineno)?;
        let ny = parse_field(f[2], "node y", path, lineno)?;
        let vx = parse_field(f[3], "vector x", path, lineno)?;
        let vy = parse_field(f[4], "vector y", path, lineno)?;
        let mag = parse_field(f[5], "magnitude", path, lineno)?;
        rows.push((t, Point::new(nx, ny), Point::new(vx, vy), mag));
    }
    let mut fields = Vec::new();
    let mut start = 0;
    while start < rows.len() {
        let t = rows[start].0;
        let mut end = start;
        while end < rows.len() && rows[end].0 == t {
            end += 1;
        }
        let block = &rows[start..end];
        let y0 = block[0].1.y;
        let nx = block.iter().take_while(|r| r.1.y == y0).count();
        if nx == 0 || !block.len().is_multiple_of(nx) {
            return Err(Error::parse(
                path,
                start + 2,
                format!("field block at t={t} is not a full grid ({} nodes)", block.len()),
            ));
        }
        let ny = block.len() / nx;
        let grid = Grid2D::new(
            block[0].1.x,
            block[nx - 1].1.x,
            y0,
            block[(ny - 1) * nx].1.y,
            nx,
            ny,
        )?;
        fields.push(DriftField {
            grid,
            t,
            vectors: block.iter().map(|r| r.2).collect(),
            magnitudes: block.iter().map(|r| r.3).collect(),
            kind,
        });
        start = end;
    }
    Ok(fields)
}

fn write_metrics(
    path: &Path,
    fidelity: &trajmetrics::FidelityScore,
    disp: &DisplacementResult,
    vel: &VelocityCurve,
    alignment: &AlignmentCurve,
    clusters: &trajmetrics::ClusterAssignment,
) -> Result<()> {
    let mut s = String::new();
    let mut kv = |key: String, value: String| {
        let _ = writeln!(s, "{key} = {value}");
    };
    kv("wasserstein.x".into(), fmt_f(fidelity.w1_x));
    kv("wasserstein.y".into(), fmt_f(fidelity.w1_y));
    kv("wasserstein.combined".into(), fmt_f(fidelity.combined));
    let n = disp.per_sample.len().max(1) as f64;
    let mean = disp.per_sample.iter().sum::<f64>() / n;
    let max = disp.per_sample.iter().cloned().fold(0.0_f64, f64::max);
    kv("displacement.mean".into(), fmt_f(mean));
    kv("displacement.max".into(), fmt_f(max));
    kv("cluster.k".into(), clusters.k.to_string());
    kv("cluster.inertia".into(), fmt_f(clusters.inertia));
    for (i, v) in vel.per_step.iter().enumerate() {
        kv(format!("velocity.{i}"), fmt_f(*v));
    }
    let n_align = alignment.mean_cs.len();
    for t in 1..=n_align {
        let cs = alignment.mean_cs[n_align - t];
        kv(format!("alignment.{t}"), cs.map(fmt_f).unwrap_or_else(|| "nan".into()));
    }
    write_text(path, &s)
}
