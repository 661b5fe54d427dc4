use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use clap::Args;
use scenescout::geometry::Vec3;
use scenescout::metrics::write_candidates_csv;
use scenescout::oracle::{brute_force_best, grid_quantile, AxisRange, OracleError, PoseGrid};
use scenescout::scene::SceneSpec;
use scenescout::scoring::SceneObjective;
use scenescout::search::Candidate;
use serde::Serialize;

use crate::run::{sha256_file, write_json};
use crate::{scorers, CliError};

const QUANTILES: [f64; 7] = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0];

#[derive(Args)]
pub struct OracleArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = -5.0, allow_hyphen_values = true)]
    grid_min: f64,
    #[arg(long, default_value_t = 5.0, allow_hyphen_values = true)]
    grid_max: f64,
    /// Lattice steps per axis as `nx,ny,nz`.
    #[arg(long, default_value = "11,11,11")]
    grid_steps: String,
    /// Number of aim points: sphere centres first, then points around the first sphere.
    #[arg(long, conflicts_with = "target")]
    targets: Option<usize>,
    /// Explicit aim point `x,y,z`; repeatable.
    #[arg(long, allow_hyphen_values = true)]
    target: Vec<String>,
    #[arg(long, default_value = "salient")]
    scorer: String,
    #[arg(long = "scorer-arg")]
    scorer_arg: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct OracleFile<'a> {
    format_version: u32,
    scene: String,
    scene_sha256: String,
    scorer: &'a str,
    scorer_args: &'a BTreeMap<String, String>,
    grid: &'a PoseGrid,
    evaluations: usize,
    skipped: usize,
    best: &'a Candidate,
    quantiles: BTreeMap<String, f64>,
}

fn parse_triple<T: std::str::FromStr>(flag: &str, s: &str) -> Result<[T; 3], CliError> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || CliError::config(format!("--{flag} `{s}` must be three comma-separated values"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let v: Vec<T> = parts.iter().map(|p| p.parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
    let mut it = v.into_iter();
    Ok([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()])
}

/// Sphere centres, then evenly spaced points on a horizontal circle of the
/// first sphere's radius around its centre.
fn default_targets(scene: &SceneSpec, count: usize) -> Vec<Vec3> {
    let mut out: Vec<Vec3> = scene.spheres.iter().map(|s| s.center).take(count).collect();
    let extra = count - out.len();
    let first = &scene.spheres[0];
    for k in 0..extra {
        let a = std::f64::consts::TAU * k as f64 / extra as f64;
        out.push(first.center + Vec3::new(a.cos(), 0.0, a.sin()) * first.radius);
    }
    out
}

pub fn execute(a: &OracleArgs) -> Result<(), CliError> {
    let steps: [usize; 3] = parse_triple("grid-steps", &a.grid_steps)?;
    let scene = SceneSpec::load(&a.scene).map_err(|e| CliError::config(format!("--scene: {e}")))?;
    let targets = if a.target.is_empty() {
        let n = a.targets.unwrap_or(1);
        if n == 0 {
            return Err(CliError::config("--targets must be at least 1"));
        }
        default_targets(&scene, n)
    } else {
        a.target
            .iter()
            .map(|t| parse_triple::<f64>("target", t).map(|[x, y, z]| Vec3::new(x, y, z)))
            .collect::<Result<_, _>>()?
    };
    let grid = PoseGrid {
        x: AxisRange::new(a.grid_min, a.grid_max, steps[0]),
        y: AxisRange::new(a.grid_min, a.grid_max, steps[1]),
        z: AxisRange::new(a.grid_min, a.grid_max, steps[2]),
        targets,
        up: Vec3::Y,
    };
    // guard before any rendering
    grid.validate().map_err(|e| match e {
        OracleError::GridTooLarge(_) => CliError::config(format!("--grid-steps: {e}")),
        other => CliError::config(format!("--grid-min/--grid-max/--grid-steps: {other}")),
    })?;

    let args = scorers::parse_args(&a.scorer_arg)?;
    let scorer = scorers::build(&a.scorer, &args, &scene)?;
    let objective = SceneObjective::new(&scene, scorer.as_ref());
    log::info!("oracle: {} grid evaluations", grid.size());
    let result = brute_force_best(&objective, &grid).map_err(|e| match e {
        OracleError::NoValidPose => CliError::config(format!("--target: {e}")),
        other => CliError::Evaluation(other.to_string()),
    })?;

    fs::create_dir_all(&a.out).map_err(|e| CliError::Other(anyhow::anyhow!("{}: {e}", a.out.display())))?;
    let scores = result.scores();
    let quantiles = QUANTILES
        .iter()
        .filter_map(|q| grid_quantile(&scores, *q).map(|v| (format!("q{:03}", (q * 100.0).round() as u32), v)))
        .collect();
    write_json(
        &a.out.join("oracle.json"),
        &OracleFile {
            format_version: 1,
            scene: a.scene.display().to_string(),
            scene_sha256: sha256_file(&a.scene)?,
            scorer: &a.scorer,
            scorer_args: &args,
            grid: &grid,
            evaluations: result.evaluations,
            skipped: result.skipped,
            best: &result.best,
            quantiles,
        },
    )?;
    let file = fs::File::create(a.out.join("oracle.csv")).map_err(|e| CliError::Other(e.into()))?;
    write_candidates_csv(file, &result.candidates).map_err(|e| CliError::Other(e.into()))?;
    log::info!(
        "oracle best {} at {} ({} evaluations, {} skipped)",
        result.best.score,
        result.best.pose.origin(),
        result.evaluations,
        result.skipped
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use scenescout::scene::{Rgb, Sphere};

    #[test]
    fn targets_start_at_sphere_centres() {
        let sphere = |x: f64| Sphere { center: Vec3::new(x, 0.0, 0.0), radius: 2.0, color: Rgb::RED };
        let scene = SceneSpec {
            format_version: 1,
            spheres: vec![sphere(1.0), sphere(-3.0)],
            background: Rgb::BLACK,
            fov_y: 45.0,
            resolution: (8, 8),
        };
        assert_eq!(default_targets(&scene, 1), vec![Vec3::new(1.0, 0.0, 0.0)]);
        let t = default_targets(&scene, 4);
        assert_eq!(t.len(), 4);
        assert_eq!(t[1], Vec3::new(-3.0, 0.0, 0.0));
        assert_eq!(t[2], Vec3::new(3.0, 0.0, 0.0));
        assert!((t[3].distance(Vec3::new(1.0, 0.0, 0.0)) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn triples() {
        assert_eq!(parse_triple::<usize>("grid-steps", "11, 11,3").unwrap(), [11, 11, 3]);
        assert!(parse_triple::<usize>("grid-steps", "11,11").is_err());
        assert!(parse_triple::<f64>("target", "1,x,2").is_err());
    }
}
