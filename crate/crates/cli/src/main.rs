//! `nf`: fit, refine and evaluate oriented normals from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use nf_core::ngl::{DistanceKind, LossVariant};
use nf_core::pointcloud::{DensityPattern, ShapeKind};

use config::{Preset, RunConfig, StageChoice};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] nf_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(nf_core::Error::InvalidInput(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "nf", version, about = "Oriented normal estimation for point clouds")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// File of `key = value` lines; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice. Falls back to NF_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    outdir: Option<PathBuf>,
    /// Base values before the config file and flags are applied.
    #[arg(long, global = true, default_value = "desk")]
    preset: Preset,
    /// Extra `key=value` override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic shape and its normals.
    Synth(SynthArgs),
    /// Fit the implicit field to one cloud and export its gradient normals.
    FitNgl(FitArgs),
    /// Train the patch network on clouds with known normals.
    TrainGvo(TrainArgs),
    /// Estimate normals for a cloud, optionally refined by a trained patch network.
    Estimate(EstimateArgs),
    /// Compare normals with a reference and write reports.
    Evaluate(EvalArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FileFormat {
    Xyz,
    Ply,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// sphere, cube or torus.
    #[arg(long)]
    kind: ShapeKind,
    /// Number of points.
    #[arg(long, default_value_t = 5000)]
    n: usize,
    /// Gaussian noise as a fraction of the bounding-box diagonal.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// none, or gradient to thin points along x.
    #[arg(long, default_value = "none")]
    density: DensityPattern,
    #[arg(long, value_enum, default_value = "xyz")]
    format: FileFormat,
    /// File stem (default: the shape name).
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args, Debug, Default)]
struct FieldArgs {
    /// Loss form: neighbor-mean (eq6), extension (eq8) or pull (eq4).
    #[arg(long)]
    loss: Option<LossVariant>,
    /// Residual norm: l2, l1 or mse.
    #[arg(long)]
    distance: Option<DistanceKind>,
    /// Optimizer steps.
    #[arg(long)]
    iterations: Option<usize>,
    /// Queries per step.
    #[arg(long)]
    batch: Option<usize>,
    /// Hidden width of the field network.
    #[arg(long)]
    width: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Neighbors averaged per query.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Cloud as .xyz or .ply.
    #[arg(long)]
    input: Option<PathBuf>,
    #[command(flatten)]
    field: FieldArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Ablation {
    NoScore,
    NoKernelWeight,
}

#[derive(Args, Debug, Default)]
struct PatchArgs {
    /// Neighbors per patch.
    #[arg(long)]
    m: Option<usize>,
    /// Spread of refinement candidates, in units of 45 degrees.
    #[arg(long)]
    eta: Option<f64>,
    /// Candidates per point at refinement time.
    #[arg(long)]
    test_vectors: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training clouds with normals; a sphere, cube and torus are synthesized
    /// when none are given.
    #[arg(long = "input")]
    inputs: Vec<PathBuf>,
    /// Points per synthesized training shape.
    #[arg(long, default_value_t = 5000)]
    corpus_size: usize,
    /// Passes over the sampled patches.
    #[arg(long)]
    epochs: Option<usize>,
    /// Weight of the angle loss.
    #[arg(long)]
    lambda: Option<f64>,
    /// Uniform candidates per training patch.
    #[arg(long)]
    train_vectors: Option<usize>,
    /// Switch off a component, repeatable.
    #[arg(long, value_enum)]
    ablate: Vec<Ablation>,
    #[command(flatten)]
    patch: PatchArgs,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// Cloud as .xyz or .ply.
    #[arg(long)]
    input: Option<PathBuf>,
    /// coarse stops after the field; refined also needs --gvo-checkpoint.
    #[arg(long)]
    stage: Option<StageChoice>,
    /// Reuse a fitted field instead of fitting one.
    #[arg(long)]
    ngl_checkpoint: Option<PathBuf>,
    /// Trained patch network from train-gvo.
    #[arg(long)]
    gvo_checkpoint: Option<PathBuf>,
    /// Also write a PLY with normals.
    #[arg(long)]
    ply: bool,
    #[command(flatten)]
    field: FieldArgs,
    #[command(flatten)]
    patch: PatchArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Baseline {
    #[value(name = "pca+mst")]
    PcaMst,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// The cloud; its normals are the reference unless --reference is given.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Normals to evaluate.
    #[arg(long)]
    normals: Option<PathBuf>,
    /// Reference normals, row-aligned with the cloud.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Compute and evaluate a classical estimate instead of --normals.
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Report file stem (default: input stem plus the stage).
    #[arg(long)]
    name: Option<String>,
    /// Shape label for the report header.
    #[arg(long)]
    shape: Option<String>,
    /// Noise label for the report header.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Stage label for the report header.
    #[arg(long)]
    label: Option<String>,
    /// Also write a PLY colored by per-point error.
    #[arg(long)]
    error_map: bool,
}

fn set_opt<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl FieldArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let n = &mut cfg.ngl;
        set_opt(&mut n.loss, self.loss);
        set_opt(&mut n.distance, self.distance);
        set_opt(&mut n.iterations, self.iterations);
        set_opt(&mut n.batch, self.batch);
        set_opt(&mut n.width, self.width);
        set_opt(&mut n.adam.lr, self.lr);
        set_opt(&mut n.k, self.k);
    }
}

impl PatchArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        set_opt(&mut cfg.gvo.m, self.m);
        set_opt(&mut cfg.gvo.eta, self.eta);
        set_opt(&mut cfg.gvo.test_vectors, self.test_vectors);
    }
}

/// Preset, then config file, then flags.
fn resolve_config(common: &Common, command: &Command) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::preset(common.preset);
    let env_seed = match std::env::var("NF_SEED") {
        Ok(s) => Some(
            s.trim()
                .parse::<u64>()
                .map_err(|_| CliError::Usage(format!("NF_SEED must be an unsigned integer, got '{s}'")))?,
        ),
        Err(_) => None,
    };
    set_opt(&mut cfg.seed, env_seed);
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        cfg.apply_text(&text)?;
    }
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got '{o}'")))?;
        cfg.set(k.trim(), v.trim()).map_err(CliError::Usage)?;
    }
    set_opt(&mut cfg.seed, common.seed);
    set_opt(&mut cfg.output_dir, common.outdir.clone());
    match command {
        Command::Synth(_) => {}
        Command::FitNgl(a) => {
            set_opt(&mut cfg.input, a.input.clone().map(Some));
            a.field.apply(&mut cfg);
        }
        Command::TrainGvo(a) => {
            set_opt(&mut cfg.gvo.epochs, a.epochs);
            set_opt(&mut cfg.gvo.lambda, a.lambda);
            set_opt(&mut cfg.gvo.train_vectors, a.train_vectors);
            for ab in &a.ablate {
                match ab {
                    Ablation::NoScore => cfg.gvo.disable_score = true,
                    Ablation::NoKernelWeight => cfg.gvo.disable_kernel_weight = true,
                }
            }
            a.patch.apply(&mut cfg);
        }
        Command::Estimate(a) => {
            set_opt(&mut cfg.input, a.input.clone().map(Some));
            set_opt(&mut cfg.stage, a.stage);
            set_opt(&mut cfg.ngl_checkpoint, a.ngl_checkpoint.clone().map(Some));
            set_opt(&mut cfg.gvo_checkpoint, a.gvo_checkpoint.clone().map(Some));
            a.field.apply(&mut cfg);
            a.patch.apply(&mut cfg);
        }
        Command::Evaluate(a) => set_opt(&mut cfg.input, a.input.clone().map(Some)),
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot set thread count: {e}")))?;
    }
    let cfg = resolve_config(&cli.common, &cli.command)?;
    match &cli.command {
        Command::Synth(a) => commands::synth(&cfg, a),
        Command::FitNgl(_) => commands::fit_ngl(&cfg),
        Command::TrainGvo(a) => commands::train_gvo(&cfg, a),
        Command::Estimate(a) => commands::estimate(&cfg, a),
        Command::Evaluate(a) => commands::evaluate(&cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let _ = e.print();
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
    };
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("run 'nf --help' for usage");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
