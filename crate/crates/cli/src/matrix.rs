//! Sweeps over scenes × modes × regimes × seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use scenescout::scene::{save_posed_set, training_ring, SceneSpec};
use scenescout::search::SearchMode;
use serde::Deserialize;

use crate::run::{execute, RegimeArg, RunSpec};
use crate::CliError;

pub const AGGREGATE_HEADER: [&str; 13] = [
    "scene",
    "mode",
    "regime",
    "budget",
    "seed",
    "status",
    "cvir",
    "mcvir",
    "best_score",
    "renders",
    "total_candidates",
    "wall_ms",
    "error",
];

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SceneEntry {
    Path(String),
    WithPoses { scene: String, poses: Option<String> },
}

#[derive(Debug, Deserialize)]
struct RegimeEntry {
    name: RegimeName,
    budget: Option<usize>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RegimeName {
    Low,
    High,
    Custom,
}

#[derive(Debug, Deserialize)]
struct RingSpec {
    count: usize,
    radius: f64,
    #[serde(default)]
    height: f64,
}

#[derive(Debug, Deserialize)]
struct ScorerSpec {
    name: String,
    #[serde(default)]
    args: BTreeMap<String, String>,
}

fn default_epochs() -> usize {
    5
}

fn default_ten() -> usize {
    10
}

/// Matrix file contents. Relative paths resolve against the matrix file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentMatrix {
    #[serde(default)]
    format_version: Option<u32>,
    scenes: Vec<SceneEntry>,
    modes: Vec<String>,
    regimes: Vec<RegimeEntry>,
    seeds: Vec<u64>,
    scorer: ScorerSpec,
    /// Training ring used for scenes listed without a pose file.
    ring: Option<RingSpec>,
    #[serde(default = "default_epochs")]
    epochs: usize,
    #[serde(default = "default_ten")]
    topk: usize,
    #[serde(default = "default_ten")]
    topc: usize,
}

struct Cell {
    scene_label: String,
    scene: PathBuf,
    poses: PathBuf,
    mode: SearchMode,
    regime: RegimeArg,
    budget: Option<usize>,
    seed: u64,
}

fn load(path: &Path) -> Result<ExperimentMatrix, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("--matrix {}: {e}", path.display())))?;
    let m: ExperimentMatrix =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("--matrix {}: {e}", path.display())))?;
    if m.format_version.is_some_and(|v| v != 1) {
        return Err(CliError::config("matrix format_version must be 1"));
    }
    for (field, empty) in [
        ("scenes", m.scenes.is_empty()),
        ("modes", m.modes.is_empty()),
        ("regimes", m.regimes.is_empty()),
        ("seeds", m.seeds.is_empty()),
    ] {
        if empty {
            return Err(CliError::config(format!("matrix field `{field}` must not be empty")));
        }
    }
    Ok(m)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scene".into())
}

/// Runs every cell and writes `aggregate.csv`. Returns the number of failed cells.
pub fn execute_matrix(matrix_path: &Path, out: &Path) -> Result<usize, CliError> {
    let m = load(matrix_path)?;
    let base = matrix_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let modes: Vec<SearchMode> = m
        .modes
        .iter()
        .map(|s| s.parse().map_err(|e: String| CliError::config(format!("matrix field `modes`: {e}"))))
        .collect::<Result<_, _>>()?;
    fs::create_dir_all(out).map_err(|e| CliError::Other(anyhow::anyhow!("{}: {e}", out.display())))?;

    // resolve training pose files, generating rings where none is given
    let mut scenes = Vec::new();
    let mut labels = BTreeMap::<String, usize>::new();
    for entry in &m.scenes {
        let (scene, poses) = match entry {
            SceneEntry::Path(s) => (resolve(&base, s), None),
            SceneEntry::WithPoses { scene, poses } => {
                (resolve(&base, scene), poses.as_ref().map(|p| resolve(&base, p)))
            }
        };
        let mut label = stem(&scene);
        let n = labels.entry(label.clone()).or_insert(0);
        *n += 1;
        if *n > 1 {
            label = format!("{label}_{n}");
        }
        let poses = match poses {
            Some(p) => p,
            None => {
                let ring = m.ring.as_ref().ok_or_else(|| {
                    CliError::config(format!(
                        "scene `{}` has no pose file and the matrix has no `ring`",
                        scene.display()
                    ))
                })?;
                let spec = SceneSpec::load(&scene).map_err(|e| CliError::config(e.to_string()))?;
                let set = training_ring(&spec, ring.count, ring.radius, ring.height)
                    .map_err(|e| CliError::config(format!("matrix field `ring`: {e}")))?;
                let dir = out.join(&label);
                fs::create_dir_all(&dir).map_err(|e| CliError::Other(e.into()))?;
                let path = dir.join("training_ring.json");
                save_posed_set(&set, &path).map_err(|e| CliError::Other(e.into()))?;
                path
            }
        };
        scenes.push((label, scene, poses));
    }

    let mut cells = Vec::new();
    for (label, scene, poses) in &scenes {
        for mode in &modes {
            for r in &m.regimes {
                for seed in &m.seeds {
                    cells.push(Cell {
                        scene_label: label.clone(),
                        scene: scene.clone(),
                        poses: poses.clone(),
                        mode: *mode,
                        regime: match r.name {
                            RegimeName::Low => RegimeArg::Low,
                            RegimeName::High => RegimeArg::High,
                            RegimeName::Custom => RegimeArg::Custom,
                        },
                        budget: r.budget,
                        seed: *seed,
                    });
                }
            }
        }
    }

    let agg_path = out.join("aggregate.csv");
    let mut agg = csv::Writer::from_path(&agg_path).map_err(|e| CliError::Other(e.into()))?;
    agg.write_record(AGGREGATE_HEADER).map_err(|e| CliError::Other(e.into()))?;
    let mut failed = 0;
    for cell in &cells {
        let budget_label = cell.budget.map_or("default".to_string(), |b| b.to_string());
        let dir = out
            .join(&cell.scene_label)
            .join(cell.mode.as_str())
            .join(format!("{}_{budget_label}", cell.regime.as_str()))
            .join(format!("seed_{}", cell.seed));
        let spec = RunSpec {
            scene: cell.scene.clone(),
            poses: cell.poses.clone(),
            mode: cell.mode,
            regime: cell.regime,
            budget: cell.budget,
            epochs: m.epochs,
            topk: m.topk,
            topc: m.topc,
            seed: cell.seed,
            scorer: m.scorer.name.clone(),
            scorer_args: m.scorer.args.iter().map(|(k, v)| format!("{k}={v}")).collect(),
            threshold: None,
            save_images: false,
            out: dir,
        };
        log::info!("cell {} {} {} seed {}", cell.scene_label, cell.mode, cell.regime.as_str(), cell.seed);
        let head = [
            cell.scene_label.clone(),
            cell.mode.as_str().to_string(),
            cell.regime.as_str().to_string(),
            budget_label,
            cell.seed.to_string(),
        ];
        let row: Vec<String> = match execute(&spec) {
            Ok(s) => head
                .into_iter()
                .chain([
                    "ok".to_string(),
                    s.report.cvir.to_string(),
                    s.report.mcvir.to_string(),
                    s.report.best_score.to_string(),
                    s.report.total_renders.to_string(),
                    s.report.total_candidates.to_string(),
                    format!("{:.3}", s.timings.total_ms),
                    String::new(),
                ])
                .collect(),
            Err(e) => {
                failed += 1;
                log::error!("cell failed: {e}");
                head.into_iter()
                    .chain(["failed".to_string()])
                    .chain(std::iter::repeat_n(String::new(), 6))
                    .chain([e.to_string()])
                    .collect()
            }
        };
        agg.write_record(&row).map_err(|e| CliError::Other(e.into()))?;
        agg.flush().map_err(|e| CliError::Other(e.into()))?;
    }
    Ok(failed)
}
