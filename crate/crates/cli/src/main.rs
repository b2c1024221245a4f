mod commands;
mod goal;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Generative inverse kinematics over distance-geometric robot graphs.
#[derive(Debug, Parser)]
#[command(name = "gengik", version, about)]
struct Cli {
    /// Worker threads for parallel stages (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a training dataset from robot descriptions.
    Gen(GenArgs),
    /// Train a model on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Sample IK solutions from a trained model.
    Sample(SampleArgs),
    /// Refine IK solutions locally from random or learned initial guesses.
    Refine(RefineArgs),
    /// Evaluate a checkpoint on held-out goals.
    Eval(EvalArgs),
    /// Time sampling for increasing sample counts.
    Bench(BenchArgs),
    /// Run an experiment described by a JSON or TOML file.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Bundled robot name or path to a JSON robot description (repeatable).
    #[arg(long = "robot", required = true)]
    robots: Vec<String>,
    /// Records per robot (per randomized instance with --randomize).
    #[arg(long)]
    samples_per_robot: usize,
    #[arg(long)]
    seed: u64,
    /// Scale every link length by an independent factor in [1-F, 1+F].
    #[arg(long, value_name = "F")]
    randomize: Option<f64>,
    /// Randomized variants per robot (with --randomize).
    #[arg(long, default_value_t = 1)]
    instances: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ArchFlag {
    Egnn,
    Mpnn,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EdgeFlag {
    AllPairs,
    GraphEdges,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Training options (JSON, or TOML by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model options (JSON, or TOML by extension).
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    kl_weight: Option<f64>,
    /// Wall-clock budget in seconds.
    #[arg(long)]
    time_limit: Option<f64>,
    #[arg(long, value_enum)]
    arch: Option<ArchFlag>,
    #[arg(long, value_enum)]
    edges: Option<EdgeFlag>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long)]
    components: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GoalArgs {
    /// Goal pose `x,y,z,qw,qx,qy,qz` (meters, unit quaternion).
    #[arg(long, allow_hyphen_values = true, conflicts_with = "goal_file")]
    goal: Option<String>,
    /// JSON array of 7-number goals, or one goal per line.
    #[arg(long)]
    goal_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Bundled robot name or path to a JSON robot description.
    #[arg(long)]
    robot: String,
    #[command(flatten)]
    goal: GoalArgs,
    #[arg(long, default_value_t = 32)]
    count: usize,
    #[arg(long)]
    seed: u64,
    /// Output JSON file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RefineArgs {
    #[arg(long)]
    robot: String,
    #[command(flatten)]
    goal: GoalArgs,
    /// `random:K` or `checkpoint:K`.
    #[arg(long, default_value = "random:32")]
    init: String,
    /// Model used by `--init checkpoint:K`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    max_iterations: usize,
    /// Output file; `.csv` selects CSV, anything else JSON (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Robots to evaluate (repeatable).
    #[arg(long = "robot", required = true)]
    robots: Vec<String>,
    /// Held-out goals per robot.
    #[arg(long, default_value_t = 200)]
    problems: usize,
    #[arg(long, default_value_t = 32)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also compute MMD against rejection-sampled references.
    #[arg(long)]
    mmd: bool,
    /// Model samples and reference samples per goal for MMD.
    #[arg(long, default_value_t = 50)]
    mmd_samples: usize,
    /// Uniform draws per goal for the MMD reference.
    #[arg(long, default_value_t = 1_000_000)]
    mmd_budget: usize,
    /// Output directory for `eval.csv` and `eval.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    robot: String,
    /// Sample counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,10,100,1000")]
    counts: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Timing CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Overrides the experiment file's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable or malformed inputs. Exit code 2.
    Input(String),
    /// Failure while doing the work. Exit code 3.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_workers(cli.workers).and_then(|()| match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Refine(a) => commands::refine(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::Experiment(a) => commands::experiment(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Input(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(3),
            }
        }
    }
}

fn configure_workers(workers: Option<usize>) -> Result<(), CliError> {
    let Some(n) = workers else { return Ok(()) };
    if n == 0 {
        return Err(CliError::Input("--workers must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}
