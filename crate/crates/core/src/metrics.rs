//! Improvement metrics, budget regimes and run reports.
//!
//! CVIR is the percent improvement of the best criterion value found over the
//! best training value; mCVIR does the same for the mean of the best N values.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::search::{Candidate, Provenance, SearchConfig};

/// Default N for mCVIR.
pub const MCVIR_TOP_N: usize = 10;

pub const LOW_POSE_BOUNDS: (usize, usize) = (250, 300);
pub const HIGH_POSE_BOUNDS: (usize, usize) = (900, 1000);
pub const LOW_POSE_DEFAULT_BUDGET: usize = 275;
pub const HIGH_POSE_DEFAULT_BUDGET: usize = 950;

/// Header of every candidate table.
pub const CANDIDATE_CSV_HEADER: [&str; 13] = [
    "id",
    "provenance",
    "epoch",
    "score",
    "origin_x",
    "origin_y",
    "origin_z",
    "look_x",
    "look_y",
    "look_z",
    "up_x",
    "up_y",
    "up_z",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Direction {
    #[default]
    Maximize,
    Minimize,
}

impl Direction {
    /// True when `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Direction::Maximize => a > b,
            Direction::Minimize => a < b,
        }
    }

    /// Ordering that puts better scores first.
    pub fn cmp_scores(self, a: f64, b: f64) -> std::cmp::Ordering {
        match self {
            Direction::Maximize => b.total_cmp(&a),
            Direction::Minimize => a.total_cmp(&b),
        }
    }

    /// `score` meets `threshold` in this direction.
    pub fn meets(self, score: f64, threshold: f64) -> bool {
        match self {
            Direction::Maximize => score >= threshold,
            Direction::Minimize => score <= threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("training score set is empty")]
    EmptyTrainingSet,
    #[error("scores must be finite and positive, got {0}")]
    NonPositiveScore(f64),
    #[error("N must be at least 1")]
    ZeroTopN,
    #[error("budget infeasible: {0}")]
    BudgetInfeasible(String),
}

fn check(all: &[f64], train: &[f64]) -> Result<(), MetricsError> {
    if train.is_empty() {
        return Err(MetricsError::EmptyTrainingSet);
    }
    match all.iter().chain(train).find(|v| !(v.is_finite() && **v > 0.0)) {
        Some(v) => Err(MetricsError::NonPositiveScore(*v)),
        None => Ok(()),
    }
}

/// Mean of the `n` best values, summed best-first.
fn best_mean(values: &[f64], n: usize, direction: Direction) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| direction.cmp_scores(*a, *b));
    let top = &sorted[..n.min(sorted.len())];
    top.iter().sum::<f64>() / top.len() as f64
}

/// Criterion value improvement ratio, in percent.
///
/// For `Minimize` the ratio is inverted so that improvement stays positive.
pub fn cvir(all_scores: &[f64], train_scores: &[f64], direction: Direction) -> Result<f64, MetricsError> {
    mcvir(all_scores, train_scores, 1, direction)
}

/// Mean criterion value improvement ratio over the best `n` values, in percent.
///
/// Both sets are averaged over `min(n, |train|)` entries, so a superset of the
/// training scores can never report a negative improvement.
pub fn mcvir(all_scores: &[f64], train_scores: &[f64], n: usize, direction: Direction) -> Result<f64, MetricsError> {
    let (found, train) = top_means(all_scores, train_scores, n, direction)?;
    Ok(match direction {
        Direction::Maximize => (found / train - 1.0) * 100.0,
        Direction::Minimize => (train / found - 1.0) * 100.0,
    })
}

/// The ratio exactly as written for a maximizing criterion, applied without
/// inverting for `Minimize` (non-positive for minimizing runs).
pub fn mcvir_uninverted(
    all_scores: &[f64],
    train_scores: &[f64],
    n: usize,
    direction: Direction,
) -> Result<f64, MetricsError> {
    let (found, train) = top_means(all_scores, train_scores, n, direction)?;
    Ok((found / train - 1.0) * 100.0)
}

fn top_means(
    all_scores: &[f64],
    train_scores: &[f64],
    n: usize,
    direction: Direction,
) -> Result<(f64, f64), MetricsError> {
    if n == 0 {
        return Err(MetricsError::ZeroTopN);
    }
    check(all_scores, train_scores)?;
    let n = n.min(train_scores.len());
    Ok((best_mean(all_scores, n, direction), best_mean(train_scores, n, direction)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegimeKind {
    LowPose,
    HighPose,
    Custom,
}

/// A total image budget (training plus generated).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub kind: RegimeKind,
    pub total_budget: usize,
}

impl RegimeSpec {
    pub fn low_pose(total_budget: usize) -> Result<Self, MetricsError> {
        Self::new(RegimeKind::LowPose, total_budget)
    }

    pub fn high_pose(total_budget: usize) -> Result<Self, MetricsError> {
        Self::new(RegimeKind::HighPose, total_budget)
    }

    pub fn custom(total_budget: usize) -> Result<Self, MetricsError> {
        Self::new(RegimeKind::Custom, total_budget)
    }

    pub fn new(kind: RegimeKind, total_budget: usize) -> Result<Self, MetricsError> {
        let spec = Self { kind, total_budget };
        if total_budget == 0 {
            return Err(MetricsError::BudgetInfeasible("total budget must be positive".into()));
        }
        if let Some((lo, hi)) = spec.bounds() {
            if !(lo..=hi).contains(&total_budget) {
                return Err(MetricsError::BudgetInfeasible(format!(
                    "{kind:?} budget {total_budget} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(spec)
    }

    pub fn bounds(&self) -> Option<(usize, usize)> {
        match self.kind {
            RegimeKind::LowPose => Some(LOW_POSE_BOUNDS),
            RegimeKind::HighPose => Some(HIGH_POSE_BOUNDS),
            RegimeKind::Custom => None,
        }
    }
}

/// Children per epoch that fit the regime budget.
pub fn regime_children(training_count: usize, epochs: usize, regime: &RegimeSpec) -> Result<usize, MetricsError> {
    if epochs == 0 {
        return Err(MetricsError::BudgetInfeasible("epochs must be at least 1".into()));
    }
    if training_count >= regime.total_budget {
        return Err(MetricsError::BudgetInfeasible(format!(
            "{training_count} training images already fill the budget of {}",
            regime.total_budget
        )));
    }
    let children = (regime.total_budget - training_count) / epochs;
    if children < 1 {
        return Err(MetricsError::BudgetInfeasible(format!(
            "budget {} leaves no children for {epochs} epochs",
            regime.total_budget
        )));
    }
    let total = training_count + children * epochs;
    let (lo, hi) = regime.bounds().unwrap_or((1, regime.total_budget));
    if !(lo..=hi).contains(&total) {
        return Err(MetricsError::BudgetInfeasible(format!("total of {total} images falls outside [{lo}, {hi}]")));
    }
    Ok(children)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Children requested for this epoch.
    pub requested: usize,
    pub emitted: usize,
    pub shortfall: usize,
    /// Interpolation pairs used (interpolation search only).
    pub pairs: Option<usize>,
    pub renders: usize,
    /// Slots whose first evaluation failed.
    pub resampled: usize,
    /// Slots lost after the retry failed too.
    pub failed: usize,
    pub best_score: f64,
    pub mean_top10: f64,
}

/// Everything a run produces that is a function of its inputs.
///
/// Wall-clock timings are kept out of the report, see [`RunTimings`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: SearchConfig,
    pub objective: String,
    pub direction: Direction,
    pub training_count: usize,
    pub training_renders: usize,
    pub epochs: Vec<EpochStats>,
    pub early_stop_epoch: Option<usize>,
    pub total_candidates: usize,
    pub total_emitted: usize,
    pub total_renders: usize,
    pub failed_evaluations: usize,
    pub best_score: f64,
    pub best_training_score: f64,
    pub cvir: f64,
    pub mcvir: f64,
    pub mcvir_n: usize,
    /// Uninverted ratios; differ from `cvir`/`mcvir` only for minimizing runs.
    pub cvir_uninverted: f64,
    pub mcvir_uninverted: f64,
    pub notes: Vec<String>,
    pub topk: Vec<Candidate>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub epoch: usize,
    pub generate_ms: f64,
    pub evaluate_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTimings {
    pub initial_ms: f64,
    pub epochs: Vec<PhaseTimings>,
    pub total_ms: f64,
}

/// Writes candidates in the shared candidate-table schema.
pub fn write_candidates_csv<'a, W: Write>(
    out: W,
    candidates: impl IntoIterator<Item = &'a Candidate>,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CANDIDATE_CSV_HEADER)?;
    for c in candidates {
        let (prov, epoch) = match c.provenance {
            Provenance::Training => ("training", 0),
            Provenance::Generated { epoch, .. } => ("generated", epoch),
            Provenance::Grid => ("grid", 0),
        };
        let (o, l, u) = (c.pose.origin(), c.pose.look_at(), c.pose.up());
        let fields = [c.id.to_string(), prov.to_string(), epoch.to_string(), c.score.to_string()]
            .into_iter()
            .chain([o, l, u].into_iter().flat_map(|v| v.to_array()).map(|x| x.to_string()));
        w.write_record(fields)?;
    }
    w.flush()?;
    Ok(())
}

/// One row of a candidate table as read back from CSV.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CandidateRow {
    pub id: u64,
    pub provenance: String,
    pub epoch: usize,
    pub score: f64,
    pub origin_x: f64,
    pub origin_y: f64,
    pub origin_z: f64,
    pub look_x: f64,
    pub look_y: f64,
    pub look_z: f64,
    pub up_x: f64,
    pub up_y: f64,
    pub up_z: f64,
}

pub fn read_candidates_csv<R: std::io::Read>(input: R) -> Result<Vec<CandidateRow>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}
