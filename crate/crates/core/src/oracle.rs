//! Exhaustive grid evaluation, used as ground truth for search quality.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraPose, Vec3};
use crate::scoring::{Objective, ScoreError};
use crate::search::{Candidate, Provenance};

/// Upper bound on grid evaluations.
pub const MAX_GRID_EVALUATIONS: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("grid of {0} evaluations exceeds the limit of {MAX_GRID_EVALUATIONS}")]
    GridTooLarge(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid point {index}: {source}")]
    Score {
        index: usize,
        #[source]
        source: ScoreError,
    },
    #[error("no grid point produced a valid pose")]
    NoValidPose,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisRange {
    pub min: f64,
    pub max: f64,
    pub steps: usize,
}

impl AxisRange {
    pub fn new(min: f64, max: f64, steps: usize) -> Self {
        Self { min, max, steps }
    }

    /// Evenly spaced values including both ends; one step gives the midpoint.
    pub fn values(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![0.5 * (self.min + self.max)];
        }
        let span = self.max - self.min;
        (0..self.steps).map(|i| self.min + span * i as f64 / (self.steps - 1) as f64).collect()
    }
}

/// Origin lattice times a set of aim points, with a fixed up vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseGrid {
    pub x: AxisRange,
    pub y: AxisRange,
    pub z: AxisRange,
    pub targets: Vec<Vec3>,
    pub up: Vec3,
}

impl PoseGrid {
    pub fn size(&self) -> usize {
        [self.x.steps, self.y.steps, self.z.steps, self.targets.len()]
            .iter()
            .fold(1usize, |acc, n| acc.saturating_mul(*n))
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        for (name, axis) in [("x", self.x), ("y", self.y), ("z", self.z)] {
            if axis.steps == 0 {
                return Err(OracleError::InvalidGrid(format!("axis {name} needs at least one step")));
            }
            if !(axis.min.is_finite() && axis.max.is_finite()) || axis.min > axis.max {
                return Err(OracleError::InvalidGrid(format!("axis {name} range is invalid")));
            }
        }
        if self.targets.is_empty() {
            return Err(OracleError::InvalidGrid("at least one target is required".into()));
        }
        let size = self.size();
        if size > MAX_GRID_EVALUATIONS {
            return Err(OracleError::GridTooLarge(size));
        }
        Ok(())
    }

    /// Grid points in lattice order: x outermost, then y, z, target.
    ///
    /// Points whose aim is degenerate (target at the origin, or straight along
    /// `up`) are `None`.
    pub fn poses(&self) -> Vec<Option<CameraPose>> {
        let (xs, ys, zs) = (self.x.values(), self.y.values(), self.z.values());
        let mut out = Vec::with_capacity(self.size());
        for &x in &xs {
            for &y in &ys {
                for &z in &zs {
                    let origin = Vec3::new(x, y, z);
                    for t in &self.targets {
                        out.push(CameraPose::looking_at_point(origin, *t, self.up).ok());
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub best: Candidate,
    /// Every valid grid pose with its score; ids are lattice indices.
    pub candidates: Vec<Candidate>,
    pub evaluations: usize,
    pub skipped: usize,
}

impl OracleResult {
    pub fn scores(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.score).collect()
    }
}

/// Scores every grid pose; the best is the first in lattice order among equals.
pub fn brute_force_best(objective: &dyn Objective, grid: &PoseGrid) -> Result<OracleResult, OracleError> {
    grid.validate()?;
    let poses = grid.poses();
    let evaluations = poses.len();
    let scored: Vec<Result<Option<Candidate>, OracleError>> = poses
        .par_iter()
        .enumerate()
        .map(|(index, pose)| match pose {
            None => Ok(None),
            Some(pose) => objective
                .evaluate(pose)
                .map(|ev| {
                    Some(Candidate { id: index as u64, pose: *pose, score: ev.score, provenance: Provenance::Grid })
                })
                .map_err(|source| OracleError::Score { index, source }),
        })
        .collect();
    let mut candidates = Vec::with_capacity(evaluations);
    for r in scored {
        if let Some(c) = r? {
            candidates.push(c);
        }
    }
    let direction = objective.direction();
    let mut best: Option<&Candidate> = None;
    for c in &candidates {
        if best.is_none_or(|b| direction.better(c.score, b.score)) {
            best = Some(c);
        }
    }
    let best = *best.ok_or(OracleError::NoValidPose)?;
    let skipped = evaluations - candidates.len();
    Ok(OracleResult { best, candidates, evaluations, skipped })
}

/// Nearest-rank empirical quantile: the value at rank `⌈q·n⌉` (at least 1) of
/// the ascending scores.
pub fn grid_quantile(scores: &[f64], q: f64) -> Option<f64> {
    if scores.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Rgb, SceneSpec, Sphere};
    use crate::scoring::{GaussianLandscape, PoseObjective, SalientPixelScorer, SceneObjective};

    fn grid(steps: usize, lo: f64, hi: f64, targets: Vec<Vec3>) -> PoseGrid {
        let axis = AxisRange::new(lo, hi, steps);
        PoseGrid { x: axis, y: axis, z: axis, targets, up: Vec3::Y }
    }

    #[test]
    fn quantiles() {
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(grid_quantile(&scores, 0.9), Some(90.0));
        assert_eq!(grid_quantile(&scores, 1.0), Some(100.0));
        assert_eq!(grid_quantile(&scores, 0.0), Some(1.0));
        assert_eq!(grid_quantile(&[], 0.5), None);
    }

    #[test]
    fn single_point_grid() {
        let peak = CameraPose::new(Vec3::ZERO, -Vec3::Z, Vec3::Y).unwrap();
        let scorer = GaussianLandscape::new(peak, 1.0).unwrap();
        let g = PoseGrid {
            x: AxisRange::new(2.0, 2.0, 1),
            y: AxisRange::new(0.0, 0.0, 1),
            z: AxisRange::new(1.0, 1.0, 1),
            targets: vec![Vec3::new(0.0, 0.0, -5.0)],
            up: Vec3::Y,
        };
        let r = brute_force_best(&PoseObjective::new(&scorer), &g).unwrap();
        assert_eq!(r.evaluations, 1);
        assert_eq!(r.best.pose.origin(), Vec3::new(2.0, 0.0, 1.0));
    }

    #[test]
    fn gaussian_peak_on_lattice_is_found() {
        let peak = CameraPose::looking_at_point(Vec3::new(1.0, 0.0, -1.0), Vec3::new(1.0, 0.0, -6.0), Vec3::Y).unwrap();
        let scorer = GaussianLandscape::new(peak, 1.0).unwrap();
        let g = grid(5, -2.0, 2.0, vec![Vec3::new(1.0, 0.0, -6.0), Vec3::new(0.0, 3.0, -6.0)]);
        let r = brute_force_best(&PoseObjective::new(&scorer), &g).unwrap();
        assert_eq!(r.best.pose.origin(), peak.origin());
        assert_eq!(r.best.score, 1.01);
        // deterministic
        let again = brute_force_best(&PoseObjective::new(&scorer), &g).unwrap();
        assert_eq!(r.best, again.best);
    }

    #[test]
    fn closest_lattice_point_wins_on_sphere() {
        // lattice step 1 over [-5, 5]; points within 1 of the centre are inside
        // or touching the sphere and see nothing. A 90° view keeps the frame
        // from filling up even at the closest lattice distance √2.
        let scene = SceneSpec {
            format_version: 1,
            spheres: vec![Sphere { center: Vec3::ZERO, radius: 1.0, color: Rgb::RED }],
            background: Rgb::BLACK,
            fov_y: 90.0,
            resolution: (32, 32),
        };
        let scorer = SalientPixelScorer { target: Rgb::RED, tolerance: 0 };
        let g = grid(11, -5.0, 5.0, vec![Vec3::ZERO]);
        let r = brute_force_best(&SceneObjective::new(&scene, &scorer), &g).unwrap();
        assert_eq!(r.evaluations, 1331);
        // the origin, plus the y axis where the view is parallel to up
        assert_eq!(r.skipped, 11);
        let d = r.best.pose.origin().norm();
        assert!((d - 2f64.sqrt()).abs() < 1e-12, "best at distance {d}");
        assert!(r.best.score < 32.0 * 32.0 + 1.0);
        let at_two = r.candidates.iter().filter(|c| (c.pose.origin().norm() - 2.0).abs() < 1e-12);
        assert!(at_two.map(|c| c.score).all(|s| s < r.best.score));
    }

    #[test]
    fn oversized_grid_is_rejected() {
        let g = grid(101, -1.0, 1.0, vec![Vec3::ZERO; 4]);
        assert_eq!(g.size(), 4_121_204);
        let peak = CameraPose::new(Vec3::ZERO, -Vec3::Z, Vec3::Y).unwrap();
        let scorer = GaussianLandscape::new(peak, 1.0).unwrap();
        assert!(matches!(
            brute_force_best(&PoseObjective::new(&scorer), &g),
            Err(OracleError::GridTooLarge(4_121_204))
        ));
        assert!(grid(0, 0.0, 1.0, vec![Vec3::ZERO]).validate().is_err());
        assert!(grid(2, 0.0, 1.0, vec![]).validate().is_err());
    }
}
