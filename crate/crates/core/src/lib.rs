//! Camera-pose search over rendered scenes.
//!
//! Given a renderer and a scalar criterion, `scenescout` searches camera poses
//! for views that maximize (or minimize) the criterion using guided random
//! search, pose interpolation or an evolutionary search, and reports the
//! improvement over the training views.

pub mod geometry;
pub mod metrics;
pub mod oracle;
pub mod scene;
pub mod scoring;
pub mod search;

pub use geometry::{generate_pose, CameraPose, CameraToWorld, GeometryError, UnitQuaternion, Vec3};
pub use metrics::{cvir, mcvir, regime_children, Direction, RegimeKind, RegimeSpec, RunReport};
pub use oracle::{brute_force_best, grid_quantile, AxisRange, PoseGrid};
pub use scene::{load_posed_set, render, save_posed_set, training_ring, Image, PosedImageSet, Rgb, SceneSpec, Sphere};
pub use scoring::{Objective, PoseObjective, PoseScorer, SceneObjective, Scorer};
pub use search::{explore_rendered, explore_scene, Candidate, SearchConfig, SearchMode, SearchOutcome};
