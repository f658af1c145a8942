//! `winmamba` command-line front end.
//!
//! Every subcommand prints one JSON document (to stdout or `--out`) that
//! embeds the fully resolved configuration it ran with. Exit codes: 0 ok,
//! 1 usage or config error, 2 data error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use winmamba_core::numerics::{GradCheckOptions, Mode, Tape};
use winmamba_core::serialize::{dense_grid, locality_report, Neighborhood, ScanAxis, WindowSpec};
use winmamba_core::toytask::{ablate, train_toy, AblationConfig, ToyConfig};
use winmamba_core::voxelgrid::io::read_point_file;
use winmamba_core::voxelgrid::{bin_points, PointCloud};
use winmamba_core::winmamba::{bev_max_pool, compact_config, gradcheck_backbone, scatter_cloud, AwfParts, Backbone, BackboneConfig};
use winmamba_core::Error;

#[derive(Parser, Debug)]
#[command(name = "winmamba", version, about = "Window-serialized Mamba backbone for sparse voxels")]
struct Cli {
    /// Worker threads for internal parallelism.
    #[arg(long, global = true, env = "WINMAMBA_THREADS")]
    threads: Option<usize>,

    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// TOML config file; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Progress messages on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Bin a point file into voxels.
    Voxelize(VoxelizeArgs),
    /// Run the backbone on a point file or a random scene.
    Forward(ForwardArgs),
    /// Train the synthetic segmentation task.
    TrainToy(TrainArgs),
    /// Seeded WSF/AWF ablation on the synthetic task.
    Ablate(AblateArgs),
    /// Window-serialization locality and throughput on a dense grid.
    BenchSerialize(BenchArgs),
    /// Finite-difference check of the backbone gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct ModelFlags {
    /// Number of backbone stages (default windows are kept).
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// Window shift fusion: on or off.
    #[arg(long, value_parser = parse_switch)]
    wsf: Option<bool>,
    /// Active AWF parts, e.g. `ABC`, `B` or `none`.
    #[arg(long = "awf-parts")]
    awf_parts: Option<AwfParts>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ModelFlags {
    fn apply(&self, cfg: &mut BackboneConfig) -> Result<(), CliError> {
        if let Some(n) = self.stages {
            if n == 0 || n > cfg.stages.len() {
                return Err(CliError::Usage(format!("--stages must be in 1..={}", cfg.stages.len())));
            }
            cfg.stages.truncate(n);
        }
        if let Some(c) = self.channels {
            cfg.set_channels(c);
        }
        if let Some(w) = self.wsf {
            cfg.set_wsf(w);
        }
        if let Some(p) = self.awf_parts {
            cfg.set_awf(p);
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
struct VoxelizeArgs {
    /// Point file (text or PCB1 binary).
    input: PathBuf,
    /// Include the voxel coordinate list in the report.
    #[arg(long)]
    coords: bool,
}

#[derive(Args, Debug)]
struct ForwardArgs {
    /// Point file; a random scene is generated when absent.
    input: Option<PathBuf>,
    /// Voxels in the random scene.
    #[arg(long, default_value_t = 400)]
    voxels: usize,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    val_scenes: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Uniformly scattered boxes instead of boundary-straddling ones.
    #[arg(long)]
    no_boundary: bool,
    /// Stop once training accuracy reaches this value.
    #[arg(long)]
    stop_at: Option<f64>,
    /// Also write the per-epoch trace as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Number of seeds, starting at 0.
    #[arg(long)]
    seeds: Option<u64>,
    /// Sweep the AWF subsets none, B, AB, ABC, ABCD.
    #[arg(long)]
    parts_grid: bool,
    #[arg(long)]
    epochs: Option<usize>,
    /// Print the aligned text table on stderr.
    #[arg(long)]
    table: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Dense grid side length.
    #[arg(long, default_value_t = 16)]
    grid: u32,
    #[arg(long, value_parser = parse_triple, default_value = "4,4,4")]
    window: [usize; 3],
    /// Shift; defaults to half the window.
    #[arg(long, value_parser = parse_triple)]
    shift: Option<[usize; 3]>,
    /// Neighbourhood: 6 or 26.
    #[arg(long, default_value_t = 6)]
    nbhd: u8,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 2)]
    stages: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 30)]
    voxels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Entries sampled per parameter tensor; all entries when absent.
    #[arg(long, default_value_t = 12)]
    max_entries: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

/// Optional sections of the `--config` file.
#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    backbone: Option<BackboneConfig>,
    toy: Option<ToyConfig>,
    ablation: Option<AblationConfig>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => 1,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn parse_switch(s: &str) -> Result<bool, String> {
    match s.to_ascii_lowercase().as_str() {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected on/off, got `{s}`")),
    }
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<Result<_, _>>()?;
    <[usize; 3]>::try_from(v).map_err(|_| format!("expected three comma-separated integers, got `{s}`"))
}

fn load_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn load_cloud(path: &Path, cfg: &BackboneConfig) -> Result<PointCloud, CliError> {
    let rows = read_point_file(path)?;
    if rows.channels != cfg.extra_channels {
        return Err(Error::Parse(format!(
            "{}: {} extra channels, config expects {}",
            path.display(),
            rows.channels,
            cfg.extra_channels
        ))
        .into());
    }
    // points outside the bounds are dropped before voxelization
    let mut positions = Vec::with_capacity(rows.positions.len());
    let mut extras = Vec::with_capacity(rows.extras.len());
    for (i, p) in rows.positions.iter().enumerate() {
        if cfg.bounds.contains(p) {
            positions.push(*p);
            extras.extend_from_slice(&rows.extras[i * rows.channels..(i + 1) * rows.channels]);
        }
    }
    if positions.is_empty() {
        return Err(Error::EmptyScene.into());
    }
    Ok(PointCloud::new(positions, extras, rows.channels, cfg.bounds)?)
}

fn log(verbose: u8, msg: impl AsRef<str>) {
    if verbose > 0 {
        eprintln!("{}", msg.as_ref());
    }
}

fn run(cli: &Cli) -> Result<Value, CliError> {
    let file = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Voxelize(a) => {
            let cfg = file.backbone.unwrap_or_default();
            cfg.validate()?;
            let cloud = load_cloud(&a.input, &cfg)?;
            let binning = bin_points(&cloud, cfg.cell)?;
            let counts: Vec<usize> = binning.members.iter().map(Vec::len).collect();
            let mut report = json!({
                "config": cfg,
                "input": a.input.display().to_string(),
                "points": cloud.len(),
                "voxels": binning.coords.len(),
                "extent": binning.extent,
                "max_points_per_voxel": counts.iter().max(),
            });
            if a.coords {
                report["coords"] = json!(binning.coords);
                report["points_per_voxel"] = json!(counts);
            }
            Ok(report)
        }
        Command::Forward(a) => {
            let mut cfg = file.backbone.unwrap_or_default();
            a.model.apply(&mut cfg)?;
            let model = Backbone::new(cfg.clone())?;
            let params = model.init_params()?;
            let cloud = match &a.input {
                Some(p) => load_cloud(p, &cfg)?,
                None => scatter_cloud(&cfg, a.voxels, cfg.seed)?,
            };
            let start = Instant::now();
            let mut tape = Tape::detached();
            let out = model.forward_cloud(&mut tape, &params, &cloud, Mode::Train)?;
            let bev = bev_max_pool(&tape, out.last());
            let occupied = bev.data().chunks(bev.shape()[2]).filter(|c| c.iter().any(|v| *v != 0.0)).count();
            Ok(json!({
                "config": cfg,
                "points": cloud.len(),
                "input_voxels": out.input.len(),
                "stages": out.trace,
                "bev_shape": bev.shape(),
                "bev_nonzero_cells": occupied,
                "parameters": params.scalar_count(),
                "fusions": tape.counter("fusion"),
                "seconds": start.elapsed().as_secs_f64(),
            }))
        }
        Command::TrainToy(a) => {
            let mut cfg = file.toy.unwrap_or_default();
            if let Some(b) = file.backbone {
                cfg.backbone = b;
            }
            a.model.apply(&mut cfg.backbone)?;
            if let Some(s) = a.model.seed {
                cfg.seed = s;
            }
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            if let Some(n) = a.scenes {
                cfg.train_scenes = n;
            }
            if let Some(n) = a.val_scenes {
                cfg.val_scenes = n;
            }
            if let Some(lr) = a.lr {
                cfg.lr = lr;
            }
            if a.no_boundary {
                cfg.boundary = false;
            }
            if a.stop_at.is_some() {
                cfg.stop_at_accuracy = a.stop_at;
            }
            log(cli.verbose, format!("training {} scenes for up to {} epochs", cfg.train_scenes, cfg.epochs));
            let report = train_toy(&cfg)?;
            if let Some(p) = &a.csv {
                write_file(p, &report.loss_csv())?;
            }
            Ok(serde_json::to_value(&report).expect("report serializes"))
        }
        Command::Ablate(a) => {
            let mut cfg = file.ablation.unwrap_or_default();
            if let Some(n) = a.seeds {
                cfg.seeds = (0..n).collect();
            }
            if a.parts_grid {
                cfg.awf = AblationConfig::parts_grid();
            }
            if let Some(e) = a.epochs {
                cfg.base.epochs = e;
            }
            log(cli.verbose, format!("{} runs", cfg.wsf.len() * cfg.awf.len() * cfg.seeds.len()));
            let table = ablate(&cfg)?;
            if a.table {
                eprint!("{}", table.to_text());
            }
            Ok(serde_json::to_value(&table).expect("table serializes"))
        }
        Command::BenchSerialize(a) => {
            let nbhd = Neighborhood::try_from(a.nbhd).map_err(CliError::Usage)?;
            let shift = a.shift.unwrap_or(a.window.map(|w| w / 2));
            let coords = dense_grid(a.grid);
            let g = a.grid as usize;
            let specs = [
                WindowSpec::new(a.window, ScanAxis::X, shift)?,
                WindowSpec::new(a.window, ScanAxis::Y, shift)?,
            ];
            let metrics = locality_report(&coords, [g; 3], &specs, nbhd)?;
            Ok(json!({
                "config": {"grid": a.grid, "window": a.window, "shift": shift, "nbhd": a.nbhd},
                "voxels": coords.len(),
                "metrics": metrics,
            }))
        }
        Command::GradCheck(a) => {
            if a.stages == 0 || a.stages > 4 {
                return Err(CliError::Usage("--stages must be in 1..=4".into()));
            }
            let cfg = compact_config(a.stages, a.channels, a.seed);
            let opts = GradCheckOptions {
                tol: a.tol,
                max_entries: Some(a.max_entries),
                seed: a.seed,
                ..GradCheckOptions::default()
            };
            let report = gradcheck_backbone(&cfg, a.voxels, &opts)?;
            let pass = report.pass;
            let value = json!({
                "config": {"backbone": cfg, "voxels": a.voxels, "options": opts},
                "report": report,
            });
            if !pass {
                return Err(CliError::Core(Error::Divergence {
                    epoch: 0,
                    detail: format!("gradient check failed: {value}"),
                }));
            }
            Ok(value)
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|source| {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
        .into()
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("usage error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(value) => {
            let text = serde_json::to_string_pretty(&value).expect("json") + "\n";
            match &cli.out {
                Some(p) => {
                    if let Err(e) = write_file(p, &text) {
                        eprintln!("error: {e}");
                        return ExitCode::from(e.exit_code());
                    }
                }
                None => print!("{text}"),
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
