//! Pose search: guided random search (GRS), pose-interpolation search (PIBS)
//! and evolution-guided pose search (EGPS).
//!
//! Each epoch runs in three phases. All random draws happen in the serial
//! generation phase, evaluation runs in parallel and results are appended in
//! generation order, so a fixed seed gives the same run at any thread count.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{generate_pose, slerp_poses, CameraPose, GeometryError, Vec3};
use crate::metrics::{
    cvir, mcvir, mcvir_uninverted, Direction, EpochStats, MetricsError, PhaseTimings, RunReport, RunTimings,
    MCVIR_TOP_N,
};
use crate::scene::{PosedImageSet, SceneSpec};
use crate::scoring::{Evaluation, Objective, SceneObjective, ScoreError, Scorer};

/// Scale of the mutation step relative to the parents' component gap.
pub const MUTATION_SCALE: f64 = 0.1;
/// Probabilities of a `−∇`, `0` and `+∇` mutation step.
pub const MUTATION_PMF: [f64; 3] = [0.05, 0.9, 0.05];
/// Attempts per pose before a degenerate GRS sample is an error.
pub const GRS_MAX_RETRIES: usize = 8;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid config: `{field}` {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("training set is empty")]
    EmptyTraining,
    #[error("scoring training view `{id}` failed: {source}")]
    TrainingScore {
        id: String,
        #[source]
        source: ScoreError,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SearchMode {
    #[serde(rename = "GRS")]
    Grs,
    #[serde(rename = "PIBS")]
    Pibs,
    #[serde(rename = "EGPS")]
    Egps,
}

impl SearchMode {
    pub const ALL: [SearchMode; 3] = [SearchMode::Grs, SearchMode::Pibs, SearchMode::Egps];

    pub fn as_str(&self) -> &'static str {
        match self {
            SearchMode::Grs => "grs",
            SearchMode::Pibs => "pibs",
            SearchMode::Egps => "egps",
        }
    }
}

impl fmt::Display for SearchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SearchMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "grs" => Ok(SearchMode::Grs),
            "pibs" => Ok(SearchMode::Pibs),
            "egps" => Ok(SearchMode::Egps),
            other => Err(format!("unknown mode `{other}` (expected grs, pibs or egps)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Training,
    Generated {
        epoch: usize,
        mode: SearchMode,
    },
    /// Produced by the exhaustive grid oracle.
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: u64,
    pub pose: CameraPose,
    pub score: f64,
    pub provenance: Provenance,
}

/// Candidates in insertion order; ids equal positions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Population {
    candidates: Vec<Candidate>,
}

impl Population {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a candidate, assigning the next id.
    ///
    /// Panics if a training candidate follows a generated one.
    pub fn push(&mut self, pose: CameraPose, score: f64, provenance: Provenance) -> u64 {
        if matches!(provenance, Provenance::Training) {
            assert!(
                self.candidates.iter().all(|c| matches!(c.provenance, Provenance::Training)),
                "training candidates must precede generated ones"
            );
        }
        let id = self.candidates.len() as u64;
        self.candidates.push(Candidate { id, pose, score, provenance });
        id
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn get(&self, id: u64) -> Option<&Candidate> {
        self.candidates.get(id as usize)
    }

    pub fn scores(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.score).collect()
    }

    pub fn training_scores(&self) -> Vec<f64> {
        self.candidates.iter().filter(|c| matches!(c.provenance, Provenance::Training)).map(|c| c.score).collect()
    }

    /// Best first; ties keep id order.
    pub fn ranked(&self, direction: Direction) -> Vec<&Candidate> {
        let mut out: Vec<&Candidate> = self.candidates.iter().collect();
        rank_candidates(&mut out, direction);
        out
    }

    pub fn best(&self, direction: Direction) -> Option<&Candidate> {
        self.ranked(direction).first().copied()
    }
}

/// Sorts best score first with a stable tie-break on candidate id.
pub fn rank_candidates(cands: &mut [&Candidate], direction: Direction) {
    cands.sort_by(|a, b| direction.cmp_scores(a.score, b.score).then(a.id.cmp(&b.id)));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub mode: SearchMode,
    pub epochs: usize,
    pub children_per_epoch: usize,
    pub topk: usize,
    pub topc: usize,
    pub seed: u64,
    /// Stop after any epoch whose best score meets this value.
    pub score_threshold: Option<f64>,
}

impl SearchConfig {
    pub fn new(mode: SearchMode, epochs: usize, children_per_epoch: usize, seed: u64) -> Self {
        Self { mode, epochs, children_per_epoch, topk: 10, topc: 10, seed, score_threshold: None }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |field, message: &str| Err(SearchError::InvalidConfig { field, message: message.into() });
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.children_per_epoch == 0 {
            return bad("children_per_epoch", "must be at least 1");
        }
        if self.topk == 0 {
            return bad("topk", "must be at least 1");
        }
        if self.topc == 0 {
            return bad("topc", "must be at least 1");
        }
        if self.mode == SearchMode::Pibs && self.topc < 2 {
            return bad("topc", "must be at least 2 for interpolation search");
        }
        if let Some(t) = self.score_threshold {
            if !t.is_finite() {
                return bad("score_threshold", "must be finite");
            }
        }
        Ok(())
    }
}

/// Uniform draw in the closed interval spanned by `a` and `b`.
fn uniform_between<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    (lo + (hi - lo) * rng.random::<f64>()).clamp(lo, hi)
}

fn uniform_in_box<R: Rng + ?Sized>(lo: Vec3, hi: Vec3, rng: &mut R) -> Vec3 {
    let x = uniform_between(lo.x, hi.x, rng);
    let y = uniform_between(lo.y, hi.y, rng);
    let z = uniform_between(lo.z, hi.z, rng);
    Vec3::new(x, y, z)
}

/// Bounds and view pools for guided random search, taken from training poses.
#[derive(Debug, Clone, PartialEq)]
pub struct GrsState {
    pub min_pos: Vec3,
    pub max_pos: Vec3,
    pub all_look_at: Vec<Vec3>,
    pub mean_up: Vec3,
}

impl GrsState {
    pub fn from_poses<'a>(poses: impl IntoIterator<Item = &'a CameraPose>) -> Result<Self, SearchError> {
        let poses: Vec<&CameraPose> = poses.into_iter().collect();
        let first = poses.first().ok_or(SearchError::EmptyTraining)?;
        let (mut lo, mut hi) = (first.origin(), first.origin());
        let mut up_sum = Vec3::ZERO;
        for p in &poses {
            lo = lo.component_min(p.origin());
            hi = hi.component_max(p.origin());
            up_sum += p.up();
        }
        let mean_up = (up_sum / poses.len() as f64)
            .normalized()
            .ok_or_else(|| GeometryError::DegenerateFrame("training up vectors cancel out".into()))?;
        Ok(Self { min_pos: lo, max_pos: hi, all_look_at: poses.iter().map(|p| p.look_at()).collect(), mean_up })
    }
}

/// `count` poses with origins uniform in the training box and views resampled
/// (with replacement) from training views.
pub fn grs_epoch<R: Rng + ?Sized>(state: &GrsState, count: usize, rng: &mut R) -> Result<Vec<CameraPose>, SearchError> {
    (0..count).map(|_| grs_sample(state, rng)).collect()
}

fn grs_sample<R: Rng + ?Sized>(state: &GrsState, rng: &mut R) -> Result<CameraPose, SearchError> {
    let mut last = None;
    for _ in 0..GRS_MAX_RETRIES {
        let origin = uniform_in_box(state.min_pos, state.max_pos, rng);
        let look = state.all_look_at[rng.random_range(0..state.all_look_at.len())];
        match generate_pose(origin, look, state.mean_up) {
            Ok(p) => return Ok(p),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt").into())
}

/// Unordered candidate-id pairs already interpolated.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PibsState {
    explored: BTreeSet<(u64, u64)>,
    history: Vec<(u64, u64)>,
}

fn unordered(a: u64, b: u64) -> (u64, u64) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl PibsState {
    pub fn contains(&self, a: u64, b: u64) -> bool {
        self.explored.contains(&unordered(a, b))
    }

    /// Records a pair; returns false if it was already present.
    pub fn insert(&mut self, a: u64, b: u64) -> bool {
        let fresh = self.explored.insert(unordered(a, b));
        if fresh {
            self.history.push(unordered(a, b));
        }
        fresh
    }

    pub fn len(&self) -> usize {
        self.explored.len()
    }

    pub fn is_empty(&self) -> bool {
        self.explored.is_empty()
    }

    /// Every pair ever handed out, in order.
    pub fn history(&self) -> &[(u64, u64)] {
        &self.history
    }
}

fn unexplored_pairs(ranked: &[&Candidate], state: &PibsState) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..ranked.len() {
        for j in i + 1..ranked.len() {
            if !state.contains(ranked[i].id, ranked[j].id) {
                out.push((i, j));
            }
        }
    }
    out
}

/// Picks up to `max_pairs` fresh pairs among the `topc` best candidates.
///
/// When every top pair has been used the whole population is searched; when
/// that is exhausted too the result may be short or empty. Returned pairs are
/// marked explored. Pairs are ordered (better, worse) in rank order.
pub fn generate_pairs<'p, R: Rng + ?Sized>(
    ranked: &[&'p Candidate],
    topc: usize,
    state: &mut PibsState,
    max_pairs: usize,
    rng: &mut R,
) -> Vec<(&'p Candidate, &'p Candidate)> {
    let top = &ranked[..topc.min(ranked.len())];
    let mut avail = unexplored_pairs(top, state);
    if avail.is_empty() {
        avail = unexplored_pairs(ranked, state);
    }
    if avail.len() > max_pairs {
        let mut keep = index::sample(rng, avail.len(), max_pairs).into_vec();
        keep.sort_unstable();
        avail = keep.into_iter().map(|k| avail[k]).collect();
    }
    avail
        .into_iter()
        .map(|(i, j)| {
            state.insert(ranked[i].id, ranked[j].id);
            (ranked[i], ranked[j])
        })
        .collect()
}

/// Interior poses per pair: `round(children / pairs)`, at least 1, reduced to
/// the floor when rounding up would overrun `children`.
pub fn interpolation_step(children: usize, pairs: usize) -> usize {
    if pairs == 0 {
        return 0;
    }
    let rounded = ((children as f64 / pairs as f64).round() as usize).max(1);
    if rounded * pairs > children {
        (children / pairs).max(1)
    } else {
        rounded
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PibsBatch {
    pub poses: Vec<CameraPose>,
    pub pairs: Vec<(u64, u64)>,
    pub step: usize,
}

/// One interpolation epoch over a ranked population.
pub fn pibs_epoch<R: Rng + ?Sized>(
    ranked: &[&Candidate],
    topc: usize,
    children: usize,
    state: &mut PibsState,
    rng: &mut R,
) -> Result<PibsBatch, GeometryError> {
    let pairs = generate_pairs(ranked, topc, state, children, rng);
    let step = interpolation_step(children, pairs.len());
    let mut poses = Vec::with_capacity(step * pairs.len());
    for (a, b) in &pairs {
        poses.extend(slerp_poses(&a.pose, &b.pose, step)?);
    }
    Ok(PibsBatch { poses, pairs: pairs.iter().map(|(a, b)| (a.id, b.id)).collect(), step })
}

/// Size of the "better half" that parents are drawn from.
pub fn parent_pool_size(n: usize) -> usize {
    n.div_ceil(2).max(2).min(n)
}

/// Rank indices of two distinct parents from the better half of `n` ranked
/// candidates. Rank `i` of `m` has weight `m − i`; the second parent is drawn
/// from the same weights with the first removed.
pub fn biased_pair_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (usize, usize) {
    assert!(n >= 2, "biased pair sampling needs at least two candidates");
    let m = parent_pool_size(n);
    let total = m * (m + 1) / 2;
    let pick = |mut u: usize, skip: Option<usize>| {
        for i in 0..m {
            if Some(i) == skip {
                continue;
            }
            let w = m - i;
            if u < w {
                return i;
            }
            u -= w;
        }
        unreachable!("draw exceeds total weight")
    };
    let first = pick(rng.random_range(0..total), None);
    let second = pick(rng.random_range(0..total - (m - first)), Some(first));
    (first, second)
}

/// Two distinct parents from a ranked population, favouring better ranks.
pub fn sample_pair_biased<'a, T, R: Rng + ?Sized>(sorted: &'a [T], rng: &mut R) -> (&'a T, &'a T) {
    let (a, b) = biased_pair_indices(sorted.len(), rng);
    (&sorted[a], &sorted[b])
}

/// Raw child components before pose assembly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Genes {
    pub origin: Vec3,
    pub look_at: Vec3,
    /// Mean of the parents' up vectors, not yet normalized.
    pub up: Vec3,
}

/// Interval crossover: origin and view components uniform between the parents',
/// up the parents' mean.
pub fn crossover<R: Rng + ?Sized>(p1: &CameraPose, p2: &CameraPose, rng: &mut R) -> Genes {
    let up = (p1.up() + p2.up()) / 2.0;
    let origin = uniform_in_box(p1.origin(), p2.origin(), rng);
    let look_at = uniform_in_box(p1.look_at(), p2.look_at(), rng);
    Genes { origin, look_at, up }
}

/// One draw from `{−gradient, 0, +gradient}` with [`MUTATION_PMF`].
pub fn mutation_delta<R: Rng + ?Sized>(gradient: f64, rng: &mut R) -> f64 {
    let u = rng.random::<f64>();
    if u < MUTATION_PMF[0] {
        -gradient
    } else if u < MUTATION_PMF[0] + MUTATION_PMF[1] {
        0.0
    } else {
        gradient
    }
}

fn mutate_vec<R: Rng + ?Sized>(v: Vec3, a: Vec3, b: Vec3, rng: &mut R) -> Vec3 {
    let grad = (a - b) * MUTATION_SCALE;
    let dx = mutation_delta(grad.x, rng);
    let dy = mutation_delta(grad.y, rng);
    let dz = mutation_delta(grad.z, rng);
    v + Vec3::new(dx, dy, dz)
}

/// Independently nudges each origin and view component by `0` or
/// `±0.1 × (parent1 − parent2)` of that component.
pub fn mutation<R: Rng + ?Sized>(
    origin: Vec3,
    look_at: Vec3,
    p1: &CameraPose,
    p2: &CameraPose,
    rng: &mut R,
) -> (Vec3, Vec3) {
    let origin = mutate_vec(origin, p1.origin(), p2.origin(), rng);
    let look_at = mutate_vec(look_at, p1.look_at(), p2.look_at(), rng);
    (origin, look_at)
}

/// One child from a ranked population (at least two entries).
pub fn egps_child<R: Rng + ?Sized>(ranked: &[&Candidate], rng: &mut R) -> CameraPose {
    let (a, b) = sample_pair_biased(ranked, rng);
    let (p1, p2) = (&a.pose, &b.pose);
    let genes = crossover(p1, p2, rng);
    let (origin, look_at) = mutation(genes.origin, genes.look_at, p1, p2, rng);
    generate_pose(origin, look_at, genes.up)
        .or_else(|_| generate_pose(origin, p1.look_at(), genes.up))
        .unwrap_or_else(|_| p1.with_origin(origin))
}

pub fn egps_epoch<R: Rng + ?Sized>(ranked: &[&Candidate], children: usize, rng: &mut R) -> Vec<CameraPose> {
    (0..children).map(|_| egps_child(ranked, rng)).collect()
}

/// Output of a finished search.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub top: Vec<Candidate>,
    pub report: RunReport,
    pub population: Population,
    pub timings: RunTimings,
    /// Pairs interpolated over the run (interpolation search only).
    pub pair_history: Vec<(u64, u64)>,
}

enum ModeState {
    Grs(GrsState),
    Pibs(PibsState),
    Egps,
}

/// Epoch-by-epoch driver for a search.
pub struct Explorer<'a> {
    objective: &'a dyn Objective,
    config: SearchConfig,
    rng: ChaCha8Rng,
    population: Population,
    mode: ModeState,
    training_count: usize,
    training_renders: usize,
    epoch: usize,
    stats: Vec<EpochStats>,
    notes: Vec<String>,
    early_stop: Option<usize>,
    timings: RunTimings,
    started: Instant,
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn mean_best(pop: &Population, direction: Direction, n: usize) -> f64 {
    let ranked = pop.ranked(direction);
    let top = &ranked[..n.min(ranked.len())];
    top.iter().map(|c| c.score).sum::<f64>() / top.len() as f64
}

impl<'a> Explorer<'a> {
    /// Validates the config and scores the training views.
    pub fn new(
        training: &PosedImageSet,
        objective: &'a dyn Objective,
        config: SearchConfig,
    ) -> Result<Self, SearchError> {
        config.validate()?;
        if training.is_empty() {
            return Err(SearchError::EmptyTraining);
        }
        if config.mode == SearchMode::Egps && training.len() < 2 {
            return Err(SearchError::InvalidConfig {
                field: "training",
                message: "evolutionary search needs at least two training views".into(),
            });
        }
        let started = Instant::now();
        let evals: Vec<Result<Evaluation, SearchError>> = training
            .entries
            .par_iter()
            .map(|e| {
                objective
                    .evaluate_stored(&e.pose, e.image.as_ref())
                    .map_err(|source| SearchError::TrainingScore { id: e.id.clone(), source })
            })
            .collect();
        let mut population = Population::new();
        let mut training_renders = 0;
        for (entry, eval) in training.entries.iter().zip(evals) {
            let eval = eval?;
            training_renders += usize::from(eval.rendered);
            population.push(entry.pose, eval.score, Provenance::Training);
        }
        let mode = match config.mode {
            SearchMode::Grs => ModeState::Grs(GrsState::from_poses(training.poses())?),
            SearchMode::Pibs => ModeState::Pibs(PibsState::default()),
            SearchMode::Egps => ModeState::Egps,
        };
        let timings = RunTimings { initial_ms: elapsed_ms(started), ..Default::default() };
        log::info!(
            "{}: scored {} training views, best {:.6}",
            config.mode,
            training.len(),
            population.best(objective.direction()).map_or(f64::NAN, |c| c.score)
        );
        Ok(Self {
            objective,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            population,
            mode,
            training_count: training.len(),
            training_renders,
            epoch: 0,
            stats: Vec::new(),
            notes: Vec::new(),
            early_stop: None,
            timings,
            started,
        })
    }

    pub fn population(&self) -> &Population {
        &self.population
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn epoch_stats(&self) -> &[EpochStats] {
        &self.stats
    }

    pub fn pibs_state(&self) -> Option<&PibsState> {
        match &self.mode {
            ModeState::Pibs(s) => Some(s),
            _ => None,
        }
    }

    /// True once all epochs ran or the score threshold stopped the run.
    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs || self.early_stop.is_some()
    }

    /// Poses for one epoch plus the number of pairs used (interpolation only).
    fn generate(&mut self, count: usize) -> Result<(Vec<CameraPose>, Option<usize>), SearchError> {
        let direction = self.objective.direction();
        match &mut self.mode {
            ModeState::Grs(state) => Ok((grs_epoch(state, count, &mut self.rng)?, None)),
            ModeState::Pibs(state) => {
                let ranked = self.population.ranked(direction);
                let batch = pibs_epoch(&ranked, self.config.topc, count, state, &mut self.rng)?;
                Ok((batch.poses, Some(batch.pairs.len())))
            }
            ModeState::Egps => {
                let ranked = self.population.ranked(direction);
                Ok((egps_epoch(&ranked, count, &mut self.rng), None))
            }
        }
    }

    /// A single replacement pose for a failed slot; interpolation has none.
    fn replacement(&mut self) -> Result<Option<CameraPose>, SearchError> {
        let direction = self.objective.direction();
        match &self.mode {
            ModeState::Grs(state) => Ok(Some(grs_sample(state, &mut self.rng)?)),
            ModeState::Pibs(_) => Ok(None),
            ModeState::Egps => {
                let ranked = self.population.ranked(direction);
                Ok(Some(egps_child(&ranked, &mut self.rng)))
            }
        }
    }

    /// Runs one epoch. Does nothing once the run is finished.
    pub fn step(&mut self) -> Result<Option<&EpochStats>, SearchError> {
        if self.is_finished() {
            return Ok(None);
        }
        self.epoch += 1;
        let epoch = self.epoch;
        let requested = self.config.children_per_epoch;
        let direction = self.objective.direction();

        let t_gen = Instant::now();
        let (poses, pairs) = self.generate(requested)?;
        let generate_ms = elapsed_ms(t_gen);

        let t_eval = Instant::now();
        let objective = self.objective;
        let results: Vec<Result<Evaluation, ScoreError>> = poses.par_iter().map(|p| objective.evaluate(p)).collect();
        let mut renders = 0;
        let mut failed = 0;
        let mut resampled = 0;
        let mut accepted = Vec::with_capacity(poses.len());
        for (slot, (pose, result)) in poses.iter().zip(results).enumerate() {
            match result {
                Ok(ev) => {
                    renders += usize::from(ev.rendered);
                    accepted.push((*pose, ev.score));
                }
                Err(first) => {
                    resampled += 1;
                    log::warn!("epoch {epoch} slot {slot}: {first}; resampling once");
                    let retry = match self.replacement()? {
                        Some(p) => objective.evaluate(&p).map(|ev| (p, ev)),
                        None => Err(first),
                    };
                    match retry {
                        Ok((p, ev)) => {
                            renders += usize::from(ev.rendered);
                            accepted.push((p, ev.score));
                        }
                        Err(e) => {
                            failed += 1;
                            self.notes.push(format!("epoch {epoch}: slot {slot} consumed after failure: {e}"));
                        }
                    }
                }
            }
        }
        let evaluate_ms = elapsed_ms(t_eval);

        let provenance = Provenance::Generated { epoch, mode: self.config.mode };
        for (pose, score) in accepted {
            self.population.push(pose, score, provenance);
        }

        let emitted = poses.len();
        let shortfall = requested.saturating_sub(emitted);
        if let Some(p) = pairs {
            if p == 0 {
                self.notes.push(format!("epoch {epoch}: no unexplored pairs remain"));
            } else if shortfall > 0 {
                self.notes.push(format!(
                    "epoch {epoch}: {p} pairs produced {emitted} of {requested} children (shortfall {shortfall})"
                ));
            }
        }
        let best = self.population.best(direction).map_or(f64::NAN, |c| c.score);
        self.stats.push(EpochStats {
            epoch,
            requested,
            emitted,
            shortfall,
            pairs,
            renders,
            resampled,
            failed,
            best_score: best,
            mean_top10: mean_best(&self.population, direction, MCVIR_TOP_N),
        });
        self.timings.epochs.push(PhaseTimings { epoch, generate_ms, evaluate_ms });
        log::info!(
            "{} epoch {epoch}/{}: emitted {emitted}, population {}, best {best:.6}",
            self.config.mode,
            self.config.epochs,
            self.population.len()
        );
        if let Some(th) = self.config.score_threshold {
            if direction.meets(best, th) {
                self.early_stop = Some(epoch);
                self.notes.push(format!("epoch {epoch}: best score {best} met threshold {th}"));
            }
        }
        Ok(self.stats.last())
    }

    /// Runs the remaining epochs and assembles the report.
    pub fn run(mut self) -> Result<SearchOutcome, SearchError> {
        while !self.is_finished() {
            self.step()?;
        }
        self.finish()
    }

    pub fn finish(mut self) -> Result<SearchOutcome, SearchError> {
        let direction = self.objective.direction();
        let all = self.population.scores();
        let train = self.population.training_scores();
        let top: Vec<Candidate> =
            self.population.ranked(direction).into_iter().take(self.config.topk).copied().collect();
        let total_emitted = self.stats.iter().map(|s| s.emitted).sum();
        let generated_renders: usize = self.stats.iter().map(|s| s.renders).sum();
        let best_training = {
            let mut t: Vec<f64> = train.clone();
            t.sort_by(|a, b| direction.cmp_scores(*a, *b));
            t[0]
        };
        self.timings.total_ms = elapsed_ms(self.started);
        let report = RunReport {
            config: self.config.clone(),
            objective: self.objective.name().to_string(),
            direction,
            training_count: self.training_count,
            training_renders: self.training_renders,
            epochs: self.stats,
            early_stop_epoch: self.early_stop,
            total_candidates: self.population.len(),
            total_emitted,
            total_renders: self.training_renders + generated_renders,
            failed_evaluations: self.notes.iter().filter(|n| n.contains("consumed")).count(),
            best_score: top[0].score,
            best_training_score: best_training,
            cvir: cvir(&all, &train, direction)?,
            mcvir: mcvir(&all, &train, MCVIR_TOP_N, direction)?,
            mcvir_n: MCVIR_TOP_N,
            cvir_uninverted: mcvir_uninverted(&all, &train, 1, direction)?,
            mcvir_uninverted: mcvir_uninverted(&all, &train, MCVIR_TOP_N, direction)?,
            notes: self.notes,
            topk: top.clone(),
        };
        let pair_history = match &self.mode {
            ModeState::Pibs(s) => s.history().to_vec(),
            _ => Vec::new(),
        };
        Ok(SearchOutcome { top, report, population: self.population, timings: self.timings, pair_history })
    }
}

/// Scores the training views, runs every epoch and returns the best `topk`.
pub fn explore_scene(
    training: &PosedImageSet,
    objective: &dyn Objective,
    config: SearchConfig,
) -> Result<SearchOutcome, SearchError> {
    Explorer::new(training, objective, config)?.run()
}

/// [`explore_scene`] with the ray-cast renderer and an image scorer.
pub fn explore_rendered(
    training: &PosedImageSet,
    scene: &SceneSpec,
    scorer: &dyn Scorer,
    config: SearchConfig,
) -> Result<SearchOutcome, SearchError> {
    explore_scene(training, &SceneObjective::new(scene, scorer), config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{training_ring, PosedEntry, Rgb, Sphere};
    use crate::scoring::{GaussianLandscape, PoseObjective, PoseScorer, SalientPixelScorer};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn pose(o: Vec3) -> CameraPose {
        CameraPose::new(o, -Vec3::Z, Vec3::Y).unwrap()
    }

    fn population_with_scores(scores: &[f64]) -> Population {
        let mut pop = Population::new();
        for (i, s) in scores.iter().enumerate() {
            pop.push(pose(Vec3::new(i as f64, 0.0, 0.0)), *s, Provenance::Training);
        }
        pop
    }

    fn scene() -> SceneSpec {
        SceneSpec {
            format_version: 1,
            spheres: vec![Sphere { center: Vec3::ZERO, radius: 1.0, color: Rgb::RED }],
            background: Rgb::BLACK,
            fov_y: 45.0,
            resolution: (24, 24),
        }
    }

    #[test]
    fn config_validation() {
        let mut c = SearchConfig::new(SearchMode::Grs, 1, 0, 0);
        assert!(matches!(c.validate(), Err(SearchError::InvalidConfig { field: "children_per_epoch", .. })));
        c.children_per_epoch = 4;
        c.validate().unwrap();
        c.mode = SearchMode::Pibs;
        c.topc = 1;
        assert!(matches!(c.validate(), Err(SearchError::InvalidConfig { field: "topc", .. })));
        c.topc = 2;
        c.topk = 0;
        assert!(matches!(c.validate(), Err(SearchError::InvalidConfig { field: "topk", .. })));
    }

    #[test]
    fn ranking_is_stable_and_idempotent() {
        let pop = population_with_scores(&[1.0, 3.0, 3.0, 2.0, 3.0]);
        let ids: Vec<u64> = pop.ranked(Direction::Maximize).iter().map(|c| c.id).collect();
        assert_eq!(ids, vec![1, 2, 4, 3, 0]);
        let mut again = pop.ranked(Direction::Maximize);
        rank_candidates(&mut again, Direction::Maximize);
        assert_eq!(again.iter().map(|c| c.id).collect::<Vec<_>>(), ids);
        let min_ids: Vec<u64> = pop.ranked(Direction::Minimize).iter().map(|c| c.id).collect();
        assert_eq!(min_ids, vec![0, 3, 1, 2, 4]);
    }

    #[test]
    #[should_panic]
    fn training_after_generated_panics() {
        let mut pop = Population::new();
        pop.push(pose(Vec3::ZERO), 1.0, Provenance::Generated { epoch: 1, mode: SearchMode::Grs });
        pop.push(pose(Vec3::ZERO), 1.0, Provenance::Training);
    }

    #[test]
    fn grs_degenerate_box_and_view_pool() {
        let p = CameraPose::new(Vec3::new(1.0, 2.0, 3.0), Vec3::new(0.2, 0.1, -1.0), Vec3::Y).unwrap();
        let state = GrsState::from_poses([&p]).unwrap();
        for q in grs_epoch(&state, 50, &mut rng(1)).unwrap() {
            assert_eq!(q.origin(), p.origin());
        }
        let poses: Vec<CameraPose> = (0..5)
            .map(|k| CameraPose::looking_at_point(Vec3::new(k as f64, 1.0, 4.0), Vec3::ZERO, Vec3::Y).unwrap())
            .collect();
        let state = GrsState::from_poses(&poses).unwrap();
        for q in grs_epoch(&state, 200, &mut rng(2)).unwrap() {
            assert!(state.all_look_at.iter().any(|l| (q.look_at() - *l).norm() < 1e-12));
        }
    }

    #[test]
    fn grs_origins_are_uniform_in_box() {
        let a = pose(Vec3::ZERO);
        let b = pose(Vec3::splat(1.0));
        let state = GrsState::from_poses([&a, &b]).unwrap();
        let samples = grs_epoch(&state, 10_000, &mut rng(3)).unwrap();
        let mean = samples.iter().fold(Vec3::ZERO, |acc, p| acc + p.origin()) / samples.len() as f64;
        for m in mean.to_array() {
            assert!((m - 0.5).abs() < 0.02, "{mean}");
        }
    }

    #[test]
    fn generate_pairs_enumerates_and_exhausts() {
        let pop = population_with_scores(&[3.0, 2.0, 1.0]);
        let ranked = pop.ranked(Direction::Maximize);
        let mut state = PibsState::default();
        let pairs = generate_pairs(&ranked, 3, &mut state, 100, &mut rng(0));
        let ids: Vec<(u64, u64)> = pairs.iter().map(|(a, b)| (a.id, b.id)).collect();
        assert_eq!(ids, vec![(0, 1), (0, 2), (1, 2)]);
        assert!(state.contains(1, 0) && state.contains(2, 1));
        assert!(generate_pairs(&ranked, 3, &mut state, 100, &mut rng(0)).is_empty());
    }

    #[test]
    fn generate_pairs_widens_beyond_top() {
        let pop = population_with_scores(&[4.0, 3.0, 2.0, 1.0]);
        let ranked = pop.ranked(Direction::Maximize);
        let mut state = PibsState::default();
        assert_eq!(generate_pairs(&ranked, 2, &mut state, 100, &mut rng(0)).len(), 1);
        let wider = generate_pairs(&ranked, 2, &mut state, 100, &mut rng(0));
        assert_eq!(wider.len(), 5);
        assert!(generate_pairs(&ranked, 2, &mut state, 100, &mut rng(0)).is_empty());
    }

    #[test]
    fn generate_pairs_caps_at_budget() {
        let pop = population_with_scores(&[5.0, 4.0, 3.0, 2.0, 1.0]);
        let ranked = pop.ranked(Direction::Maximize);
        let mut state = PibsState::default();
        let mut seen = BTreeSet::new();
        for _ in 0..3 {
            for (a, b) in generate_pairs(&ranked, 5, &mut state, 4, &mut rng(9)) {
                assert!(seen.insert(unordered(a.id, b.id)));
            }
        }
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn interpolation_step_rounding() {
        assert_eq!(interpolation_step(12, 3), 4);
        assert_eq!(interpolation_step(10, 3), 3);
        assert_eq!(interpolation_step(10, 4), 2);
        assert_eq!(interpolation_step(48, 45), 1);
        assert_eq!(interpolation_step(5, 0), 0);
    }

    #[test]
    fn pibs_epoch_counts() {
        let pop = population_with_scores(&[3.0, 2.0, 1.0]);
        let ranked = pop.ranked(Direction::Maximize);
        let batch = pibs_epoch(&ranked, 3, 12, &mut PibsState::default(), &mut rng(0)).unwrap();
        assert_eq!((batch.step, batch.poses.len()), (4, 12));
        let batch = pibs_epoch(&ranked, 3, 10, &mut PibsState::default(), &mut rng(0)).unwrap();
        assert_eq!((batch.step, batch.poses.len()), (3, 9));

        let mut same = Population::new();
        same.push(pose(Vec3::X), 1.0, Provenance::Training);
        same.push(pose(Vec3::X), 1.0, Provenance::Training);
        let ranked = same.ranked(Direction::Maximize);
        let batch = pibs_epoch(&ranked, 2, 5, &mut PibsState::default(), &mut rng(0)).unwrap();
        assert_eq!(batch.poses.len(), 5);
        assert!(batch.poses.iter().all(|p| (p.origin() - Vec3::X).norm() < 1e-12));
    }

    #[test]
    fn biased_pair_weights() {
        let mut r = rng(11);
        let mut counts = [0usize; 2];
        for _ in 0..30_000 {
            let (a, b) = biased_pair_indices(2, &mut r);
            assert_ne!(a, b);
            counts[a] += 1;
        }
        let f0 = counts[0] as f64 / 30_000.0;
        assert!((f0 - 2.0 / 3.0).abs() < 0.01, "{f0}");

        let n = 100_000;
        let mut first = [0usize; 4];
        for _ in 0..n {
            // 7 or 8 candidates both give a pool of 4
            let (a, b) = biased_pair_indices(7, &mut r);
            assert!(a < 4 && b < 4 && a != b);
            first[a] += 1;
        }
        assert!((first[0] as f64 / n as f64 - 0.4).abs() < 0.01);
        assert_eq!(parent_pool_size(2), 2);
        assert_eq!(parent_pool_size(3), 2);
        assert_eq!(parent_pool_size(8), 4);
        assert_eq!(parent_pool_size(9), 5);
    }

    #[test]
    fn crossover_examples() {
        let p = CameraPose::new(Vec3::new(1.0, 2.0, 3.0), Vec3::new(0.3, 0.1, -1.0), Vec3::Y).unwrap();
        let g = crossover(&p, &p, &mut rng(0));
        assert_eq!((g.origin, g.look_at, g.up), (p.origin(), p.look_at(), p.up()));

        let a = CameraPose::new(Vec3::ZERO, -Vec3::Z, Vec3::Y).unwrap();
        let b = CameraPose::new(Vec3::new(2.0, 4.0, 6.0), -Vec3::Z, Vec3::X).unwrap();
        let mut r = rng(5);
        for _ in 0..1000 {
            let g = crossover(&a, &b, &mut r);
            assert!((0.0..=2.0).contains(&g.origin.x));
            assert!((0.0..=4.0).contains(&g.origin.y));
            assert!((0.0..=6.0).contains(&g.origin.z));
            assert_eq!(g.up, Vec3::new(0.5, 0.5, 0.0));
        }
    }

    #[test]
    fn mutation_examples() {
        let p = CameraPose::new(Vec3::new(1.0, 2.0, 3.0), Vec3::new(0.3, 0.1, -1.0), Vec3::Y).unwrap();
        let mut r = rng(1);
        for _ in 0..1000 {
            let (o, l) = mutation(Vec3::splat(0.5), Vec3::splat(-0.25), &p, &p, &mut r);
            assert_eq!((o, l), (Vec3::splat(0.5), Vec3::splat(-0.25)));
        }
        let p1 = pose(Vec3::new(3.0, 0.0, 0.0));
        let p2 = pose(Vec3::new(1.0, 0.0, 0.0));
        for _ in 0..1000 {
            let (o, _) = mutation(Vec3::ZERO, -Vec3::Z, &p1, &p2, &mut r);
            assert!([-0.2, 0.0, 0.2].contains(&o.x), "{}", o.x);
            assert_eq!((o.y, o.z), (0.0, 0.0));
        }
    }

    #[test]
    fn mutation_delta_frequencies() {
        let mut r = rng(2);
        let n = 100_000;
        let zeros = (0..n).filter(|_| mutation_delta(1.0, &mut r) == 0.0).count();
        let f = zeros as f64 / n as f64;
        assert!((0.895..=0.905).contains(&f), "{f}");
    }

    #[test]
    fn egps_children_stay_near_parents() {
        let mut pop = Population::new();
        pop.push(CameraPose::new(Vec3::ZERO, Vec3::new(0.1, 0.0, -1.0), Vec3::Y).unwrap(), 2.0, Provenance::Training);
        pop.push(
            CameraPose::new(Vec3::new(2.0, 1.0, -3.0), Vec3::new(-0.2, 0.1, -1.0), Vec3::Y).unwrap(),
            1.0,
            Provenance::Training,
        );
        let ranked = pop.ranked(Direction::Maximize);
        let kids = egps_epoch(&ranked, 100, &mut rng(4));
        assert_eq!(kids.len(), 100);
        let (lo, hi) = (Vec3::new(0.0, 0.0, -3.0), Vec3::new(2.0, 1.0, 0.0));
        let pad = (hi - lo) * 0.1;
        for k in &kids {
            let o = k.origin();
            for ((v, l), (h, p)) in o.to_array().iter().zip(lo.to_array()).zip(hi.to_array().iter().zip(pad.to_array()))
            {
                assert!(*v >= l - p - 1e-12 && *v <= h + p + 1e-12);
            }
        }
    }

    #[test]
    fn egps_handles_tied_scores() {
        let pop = population_with_scores(&[1.0; 6]);
        let ranked = pop.ranked(Direction::Maximize);
        assert_eq!(egps_epoch(&ranked, 30, &mut rng(8)).len(), 30);
    }

    fn landscape_training(n: usize) -> PosedImageSet {
        let entries = (0..n)
            .map(|k| {
                let o = Vec3::new(k as f64 * 0.3, 0.1 * k as f64, -(k as f64) * 0.2);
                PosedEntry { id: format!("t{k}"), pose: pose(o), file_path: None, image: None }
            })
            .collect();
        PosedImageSet { fov_y: 45.0, width: 8, height: 8, entries }
    }

    #[test]
    fn explore_budget_and_determinism() {
        let scene = scene();
        let scorer = SalientPixelScorer { target: Rgb::RED, tolerance: 0 };
        let ring = training_ring(&scene, 10, 5.0, 0.0).unwrap();
        let cfg = SearchConfig::new(SearchMode::Grs, 5, 48, 7);
        let out = explore_rendered(&ring, &scene, &scorer, cfg.clone()).unwrap();
        assert_eq!(out.population.len(), 250);
        assert_eq!(out.report.total_renders, 250);
        assert_eq!(out.top.len(), 10);
        let again = explore_rendered(&ring, &scene, &scorer, cfg).unwrap();
        assert_eq!(serde_json::to_string(&out.report).unwrap(), serde_json::to_string(&again.report).unwrap());
    }

    #[test]
    fn explore_rejects_bad_config_before_scoring() {
        let peak = pose(Vec3::ZERO);
        let scorer = GaussianLandscape::new(peak, 1.0).unwrap();
        let obj = PoseObjective::new(&scorer);
        let cfg = SearchConfig::new(SearchMode::Egps, 1, 0, 0);
        assert!(matches!(explore_scene(&landscape_training(4), &obj, cfg), Err(SearchError::InvalidConfig { .. })));
        let empty = PosedImageSet { fov_y: 45.0, width: 8, height: 8, entries: vec![] };
        let cfg = SearchConfig::new(SearchMode::Egps, 1, 3, 0);
        assert!(matches!(explore_scene(&empty, &obj, cfg), Err(SearchError::EmptyTraining)));
    }

    #[test]
    fn best_score_never_decreases() {
        let peak = pose(Vec3::new(1.0, 0.5, -1.0));
        let scorer = GaussianLandscape::new(peak, 1.0).unwrap();
        let obj = PoseObjective::new(&scorer);
        for mode in SearchMode::ALL {
            let out = explore_scene(&landscape_training(8), &obj, SearchConfig::new(mode, 5, 20, 3)).unwrap();
            let bests: Vec<f64> = out.report.epochs.iter().map(|e| e.best_score).collect();
            assert!(bests.windows(2).all(|w| w[1] >= w[0]), "{mode}: {bests:?}");
            assert!(out.report.cvir >= 0.0 && out.report.mcvir >= 0.0);
            assert_eq!(out.report.total_renders, 0);
        }
    }

    #[test]
    fn threshold_stops_early() {
        let peak = pose(Vec3::ZERO);
        let scorer = GaussianLandscape::new(peak, 1.0).unwrap();
        let obj = PoseObjective::new(&scorer);
        let mut cfg = SearchConfig::new(SearchMode::Egps, 5, 10, 1);
        cfg.score_threshold = Some(0.1);
        let out = explore_scene(&landscape_training(4), &obj, cfg).unwrap();
        assert_eq!(out.report.early_stop_epoch, Some(1));
        assert_eq!(out.report.epochs.len(), 1);
    }

    struct Flaky;
    impl PoseScorer for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }
        fn score(&self, pose: &CameraPose) -> Result<f64, ScoreError> {
            // fails in a slab around x = 1
            if (pose.origin().x - 1.0).abs() < 0.1 {
                Err(ScoreError::External("inside the slab".into()))
            } else {
                Ok(1.0 + pose.origin().x)
            }
        }
    }

    fn line_training(xs: &[f64]) -> PosedImageSet {
        let entries = xs
            .iter()
            .enumerate()
            .map(|(k, x)| PosedEntry {
                id: format!("t{k}"),
                pose: pose(Vec3::new(*x, 0.0, 0.0)),
                file_path: None,
                image: None,
            })
            .collect();
        PosedImageSet { fov_y: 45.0, width: 8, height: 8, entries }
    }

    #[test]
    fn failing_training_view_is_fatal() {
        let obj = PoseObjective::new(&Flaky);
        assert!(matches!(
            explore_scene(&line_training(&[1.0, 2.0]), &obj, SearchConfig::new(SearchMode::Grs, 2, 40, 0)),
            Err(SearchError::TrainingScore { .. })
        ));
    }

    #[test]
    fn failed_slots_are_resampled_then_consumed() {
        let obj = PoseObjective::new(&Flaky);
        let out =
            explore_scene(&line_training(&[0.0, 2.0]), &obj, SearchConfig::new(SearchMode::Grs, 2, 200, 0)).unwrap();
        let resampled: usize = out.report.epochs.iter().map(|e| e.resampled).sum();
        assert!(resampled > 0);
        assert_eq!(out.population.len(), 2 + 400 - out.report.failed_evaluations);

        // interpolation has no replacement: the midpoint x = 1 is consumed
        let mut cfg = SearchConfig::new(SearchMode::Pibs, 1, 3, 0);
        cfg.topc = 2;
        let out = explore_scene(&line_training(&[0.0, 2.0]), &obj, cfg).unwrap();
        assert_eq!(out.report.failed_evaluations, 1);
        assert_eq!(out.report.epochs[0].emitted, 3);
        assert_eq!(out.population.len(), 4);
    }
}
