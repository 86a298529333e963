use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ssmrec::data::InputFormat;
use ssmrec::theory::Suite;

mod artifacts;
mod run;
mod sweep;

#[derive(Parser, Debug)]
#[command(name = "ssmrec", version, about = "Sampled softmax recommenders and their analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print user, item and interaction counts of a dataset as JSON.
    Stats(DataArgs),
    /// Train one model per seed and write checkpoints, histories and a manifest.
    Train(TrainArgs),
    /// Score a checkpoint on the test split.
    Evaluate(EvaluateArgs),
    /// Train over a cartesian grid of settings and write one CSV row per point.
    Sweep(SweepArgs),
    /// Run the numerical checks of the analysis.
    Verify(VerifyArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// `adjacency` (user item item ...) or `pairs` (user item).
    #[arg(long, default_value = "adjacency", value_parser = parse_format)]
    pub format: InputFormat,
}

fn parse_format(s: &str) -> Result<InputFormat, String> {
    s.parse().map_err(|e: ssmrec::Error| e.to_string())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated seeds; overrides the config seed for initialisation
    /// and sampling. The split always uses the config seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Write report.json, report.csv and a manifest here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Temperatures, e.g. 0.1,0.2,0.5,1.0
    #[arg(long = "tau", value_delimiter = ',')]
    pub temperatures: Vec<f64>,
    #[arg(long = "l2", value_delimiter = ',')]
    pub l2_coeffs: Vec<f64>,
    #[arg(long = "lr", value_delimiter = ',')]
    pub learning_rates: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    /// Add the train x test similarity grid (IP-IP, IP-COS, COS-IP, COS-COS).
    #[arg(long)]
    pub similarity_grid: bool,
    /// Add the propagation grid: (alpha0, alpha1) in {(0.5,0), (0.5,0.5), (1,0)}
    /// on the user and item side, labelled e.g. `user:0.5:0`.
    #[arg(long)]
    pub propagation_grid: bool,
    #[arg(long, default_value_t = 64)]
    pub max_points: usize,
    /// Number of grid points trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, default_value = "all", value_parser = parse_suite)]
    pub suite: Suite,
    /// Also write the records to this file.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long, default_value_t = 20240)]
    pub seed: u64,
    /// Perturb analytic gradients; the gradient checks must then fail.
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: ssmrec::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = run::apply_thread_cap() {
        eprintln!("error: {e:#}");
        return ExitCode::from(run::exit_code(&e));
    }
    let result = match cli.command {
        Command::Stats(a) => run::stats(&a),
        Command::Train(a) => run::train(&a),
        Command::Evaluate(a) => run::evaluate(&a),
        Command::Sweep(a) => sweep::sweep(&a),
        Command::Verify(a) => run::verify(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(run::exit_code(&e))
        }
    }
}
