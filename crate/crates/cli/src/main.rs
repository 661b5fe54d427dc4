use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scenescout::search::SearchMode;

mod matrix;
mod oracle_cmd;
mod run;
mod scorers;

use run::{RegimeArg, RunSpec};

/// Failure classes, mapped to process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or input files (exit 2).
    #[error("{0}")]
    Config(String),
    /// A scorer or render failed after retries (exit 3).
    #[error("{0}")]
    Evaluation(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Evaluation(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "scenescout", version, about = "Camera-pose search over rendered scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one search and write report.json and candidates.csv.
    Run(RunArgs),
    /// Run every (scene, mode, regime, seed) cell of a matrix file.
    Matrix {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exhaustively score a pose grid.
    Oracle(oracle_cmd::OracleArgs),
    /// Write a training pose file on a horizontal ring around the first sphere.
    Ring {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        radius: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        height: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    poses: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    mode: SearchMode,
    #[arg(long, value_enum, default_value = "high")]
    regime: RegimeArg,
    /// Total image budget; defaults to 275 (low) or 950 (high).
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    topk: usize,
    #[arg(long, default_value_t = 10)]
    topc: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "salient")]
    scorer: String,
    /// Scorer parameter as key=value; repeatable.
    #[arg(long = "scorer-arg")]
    scorer_arg: Vec<String>,
    /// Stop once the best score reaches this value.
    #[arg(long, allow_hyphen_values = true)]
    threshold: Option<f64>,
    /// Also write PNGs of the top-k poses.
    #[arg(long)]
    save_images: bool,
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(s: &str) -> Result<SearchMode, String> {
    s.parse()
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("SCENESCOUT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::config(format!("SCENESCOUT_THREADS `{raw}` must be a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Other(e.into()))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Run(a) => {
            let spec = RunSpec {
                scene: a.scene,
                poses: a.poses,
                mode: a.mode,
                regime: a.regime,
                budget: a.budget,
                epochs: a.epochs,
                topk: a.topk,
                topc: a.topc,
                seed: a.seed,
                scorer: a.scorer,
                scorer_args: a.scorer_arg,
                threshold: a.threshold,
                save_images: a.save_images,
                out: a.out,
            };
            run::execute(&spec).map(|_| ())
        }
        Command::Matrix { matrix, out } => {
            let failed = matrix::execute_matrix(&matrix, &out)?;
            if failed > 0 {
                return Err(CliError::Evaluation(format!("{failed} matrix cells failed (see aggregate.csv)")));
            }
            Ok(())
        }
        Command::Oracle(a) => oracle_cmd::execute(&a),
        Command::Ring { scene, count, radius, height, out } => {
            let spec = scenescout::SceneSpec::load(&scene).map_err(|e| CliError::config(format!("--scene: {e}")))?;
            let set = scenescout::training_ring(&spec, count, radius, height)
                .map_err(|e| CliError::config(format!("--count/--radius: {e}")))?;
            scenescout::save_posed_set(&set, &out).map_err(|e| CliError::Other(e.into()))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
