use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use scenescout::metrics::{
    regime_children, write_candidates_csv, RegimeKind, RegimeSpec, RunReport, RunTimings, HIGH_POSE_DEFAULT_BUDGET,
    LOW_POSE_DEFAULT_BUDGET,
};
use scenescout::scene::{load_posed_set, render, SceneSpec};
use scenescout::search::{explore_rendered, SearchConfig, SearchError, SearchMode};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{scorers, CliError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum RegimeArg {
    Low,
    High,
    Custom,
}

impl RegimeArg {
    pub fn as_str(&self) -> &'static str {
        match self {
            RegimeArg::Low => "low",
            RegimeArg::High => "high",
            RegimeArg::Custom => "custom",
        }
    }
}

/// Resolves a regime name and optional budget into a validated spec.
pub fn regime_spec(regime: RegimeArg, budget: Option<usize>) -> Result<RegimeSpec, CliError> {
    let spec = match (regime, budget) {
        (RegimeArg::Low, b) => RegimeSpec::new(RegimeKind::LowPose, b.unwrap_or(LOW_POSE_DEFAULT_BUDGET)),
        (RegimeArg::High, b) => RegimeSpec::new(RegimeKind::HighPose, b.unwrap_or(HIGH_POSE_DEFAULT_BUDGET)),
        (RegimeArg::Custom, Some(b)) => RegimeSpec::new(RegimeKind::Custom, b),
        (RegimeArg::Custom, None) => return Err(CliError::config("--budget is required with --regime custom")),
    };
    spec.map_err(|e| CliError::config(format!("--budget: {e}")))
}

/// Everything needed for one search run.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub scene: PathBuf,
    pub poses: PathBuf,
    pub mode: SearchMode,
    pub regime: RegimeArg,
    pub budget: Option<usize>,
    pub epochs: usize,
    pub topk: usize,
    pub topc: usize,
    pub seed: u64,
    pub scorer: String,
    pub scorer_args: Vec<String>,
    pub threshold: Option<f64>,
    pub save_images: bool,
    pub out: PathBuf,
}

/// Inputs echoed into every report so a run can be repeated exactly.
#[derive(Debug, Serialize)]
struct RunInputs<'a> {
    scene: String,
    scene_sha256: String,
    poses: String,
    poses_sha256: String,
    regime: &'a str,
    total_budget: usize,
    scorer: &'a str,
    scorer_args: &'a BTreeMap<String, String>,
}

#[derive(Debug, Serialize)]
struct ReportFile<'a> {
    format_version: u32,
    inputs: RunInputs<'a>,
    report: &'a RunReport,
}

#[derive(Debug)]
pub struct RunSummary {
    pub report: RunReport,
    pub timings: RunTimings,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.into()))? + "\n";
    fs::write(path, text).map_err(|e| CliError::Other(anyhow::anyhow!("{}: {e}", path.display())))
}

pub fn execute(spec: &RunSpec) -> Result<RunSummary, CliError> {
    let scene = SceneSpec::load(&spec.scene).map_err(|e| CliError::config(format!("--scene: {e}")))?;
    let training = load_posed_set(&spec.poses).map_err(|e| CliError::config(format!("--poses: {e}")))?;
    let args = scorers::parse_args(&spec.scorer_args)?;
    let scorer = scorers::build(&spec.scorer, &args, &scene)?;
    let regime = regime_spec(spec.regime, spec.budget)?;
    let children = regime_children(training.len(), spec.epochs, &regime)
        .map_err(|e| CliError::config(format!("--budget: {e}")))?;

    let mut config = SearchConfig::new(spec.mode, spec.epochs, children, spec.seed);
    config.topk = spec.topk;
    config.topc = spec.topc;
    config.score_threshold = spec.threshold;
    if let Err(SearchError::InvalidConfig { field, message }) = config.validate() {
        return Err(CliError::config(format!("--{field}: {message}")));
    }

    let outcome = explore_rendered(&training, &scene, scorer.as_ref(), config).map_err(|e| match e {
        SearchError::InvalidConfig { field, message } => CliError::config(format!("--{field}: {message}")),
        SearchError::EmptyTraining => CliError::config("--poses: training set is empty"),
        SearchError::Metrics(m) => CliError::Other(m.into()),
        other => CliError::Evaluation(other.to_string()),
    })?;

    fs::create_dir_all(&spec.out).map_err(|e| CliError::Other(anyhow::anyhow!("{}: {e}", spec.out.display())))?;
    let inputs = RunInputs {
        scene: spec.scene.display().to_string(),
        scene_sha256: sha256_file(&spec.scene)?,
        poses: spec.poses.display().to_string(),
        poses_sha256: sha256_file(&spec.poses)?,
        regime: spec.regime.as_str(),
        total_budget: regime.total_budget,
        scorer: &spec.scorer,
        scorer_args: &args,
    };
    write_json(&spec.out.join("report.json"), &ReportFile { format_version: 1, inputs, report: &outcome.report })?;
    let csv_path = spec.out.join("candidates.csv");
    let file =
        fs::File::create(&csv_path).map_err(|e| CliError::Other(anyhow::anyhow!("{}: {e}", csv_path.display())))?;
    write_candidates_csv(file, outcome.population.candidates()).map_err(|e| CliError::Other(e.into()))?;
    write_json(&spec.out.join("timings.json"), &outcome.timings)?;

    if spec.save_images {
        let dir = spec.out.join("images");
        fs::create_dir_all(&dir).map_err(|e| CliError::Other(e.into()))?;
        for (rank, c) in outcome.top.iter().enumerate() {
            let path = dir.join(format!("rank{rank:02}_id{}.png", c.id));
            render(&scene, &c.pose).save(&path).map_err(|e| CliError::Other(e.into()))?;
        }
    }

    if outcome.report.failed_evaluations > 0 {
        return Err(CliError::Evaluation(format!(
            "{} evaluations failed after retry (see notes in report.json)",
            outcome.report.failed_evaluations
        )));
    }
    log::info!(
        "{}: best {:.6}, CVIR {:.3}%, mCVIR {:.3}%, {} images",
        spec.mode,
        outcome.report.best_score,
        outcome.report.cvir,
        outcome.report.mcvir,
        outcome.report.total_candidates
    );
    Ok(RunSummary { report: outcome.report, timings: outcome.timings })
}
