//! Criterion functions: image scorers, pose scorers and the objectives that
//! bind them to a renderer.
//!
//! Every shipped scorer returns finite values strictly greater than zero so
//! that improvement ratios stay well defined. External scorers must shift
//! their outputs accordingly.

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::CameraPose;
use crate::metrics::Direction;
use crate::scene::{render, Image, Rgb, SceneSpec};

/// Constant added by the landscape scorers to keep them strictly positive.
pub const LANDSCAPE_FLOOR: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("scorer `{scorer}` returned {value}, expected a finite positive number")]
    NonPositive { scorer: String, value: f64 },
    #[error("landscape needs at least one peak")]
    EmptyPeaks,
    #[error("invalid scorer parameter: {0}")]
    InvalidParameter(String),
    #[error("external scorer failed: {0}")]
    External(String),
}

/// Scores a rendered image.
pub trait Scorer: Send + Sync {
    fn name(&self) -> &str;
    fn direction(&self) -> Direction {
        Direction::Maximize
    }
    fn score(&self, image: &Image) -> Result<f64, ScoreError>;
}

/// Scores a pose directly, bypassing rendering.
pub trait PoseScorer: Send + Sync {
    fn name(&self) -> &str;
    fn direction(&self) -> Direction {
        Direction::Maximize
    }
    fn score(&self, pose: &CameraPose) -> Result<f64, ScoreError>;
}

/// Result of evaluating one pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub score: f64,
    pub rendered: bool,
}

/// What a search maximizes or minimizes: pose in, score out.
pub trait Objective: Sync {
    fn name(&self) -> &str;
    fn direction(&self) -> Direction;
    fn evaluate(&self, pose: &CameraPose) -> Result<Evaluation, ScoreError>;

    /// Scores a training view, using its stored image when there is one.
    fn evaluate_stored(&self, pose: &CameraPose, _image: Option<&Image>) -> Result<Evaluation, ScoreError> {
        self.evaluate(pose)
    }
}

fn positive(name: &str, value: f64) -> Result<f64, ScoreError> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(ScoreError::NonPositive { scorer: name.to_string(), value })
    }
}

/// Renders with a scene, then scores the image.
pub struct SceneObjective<'a> {
    pub scene: &'a SceneSpec,
    pub scorer: &'a dyn Scorer,
}

impl<'a> SceneObjective<'a> {
    pub fn new(scene: &'a SceneSpec, scorer: &'a dyn Scorer) -> Self {
        Self { scene, scorer }
    }
}

impl Objective for SceneObjective<'_> {
    fn name(&self) -> &str {
        self.scorer.name()
    }

    fn direction(&self) -> Direction {
        self.scorer.direction()
    }

    fn evaluate(&self, pose: &CameraPose) -> Result<Evaluation, ScoreError> {
        let image = render(self.scene, pose);
        let score = positive(self.scorer.name(), self.scorer.score(&image)?)?;
        Ok(Evaluation { score, rendered: true })
    }

    fn evaluate_stored(&self, pose: &CameraPose, image: Option<&Image>) -> Result<Evaluation, ScoreError> {
        match image {
            Some(img) => {
                let score = positive(self.scorer.name(), self.scorer.score(img)?)?;
                Ok(Evaluation { score, rendered: false })
            }
            None => self.evaluate(pose),
        }
    }
}

/// Adapts a [`PoseScorer`] into an objective; never renders.
pub struct PoseObjective<'a> {
    pub scorer: &'a dyn PoseScorer,
}

impl<'a> PoseObjective<'a> {
    pub fn new(scorer: &'a dyn PoseScorer) -> Self {
        Self { scorer }
    }
}

impl Objective for PoseObjective<'_> {
    fn name(&self) -> &str {
        self.scorer.name()
    }

    fn direction(&self) -> Direction {
        self.scorer.direction()
    }

    fn evaluate(&self, pose: &CameraPose) -> Result<Evaluation, ScoreError> {
        let score = positive(self.scorer.name(), self.scorer.score(pose)?)?;
        Ok(Evaluation { score, rendered: false })
    }
}

/// `1 +` the number of pixels within `tolerance` of `target` on every channel.
pub fn salient_pixel_count(image: &Image, target: Rgb, tolerance: u8) -> f64 {
    1.0 + image.pixels().iter().filter(|p| p.within(&target, tolerance)).count() as f64
}

/// Counts pixels of a target colour, standing in for a saliency network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalientPixelScorer {
    pub target: Rgb,
    pub tolerance: u8,
}

impl Scorer for SalientPixelScorer {
    fn name(&self) -> &str {
        "salient"
    }

    fn score(&self, image: &Image) -> Result<f64, ScoreError> {
        Ok(salient_pixel_count(image, self.target, self.tolerance))
    }
}

fn kernel(pose: &CameraPose, peak: &CameraPose, length_scale: f64) -> f64 {
    let d_o = pose.origin().distance(peak.origin());
    let d_a = pose.look_at().angle_to(peak.look_at());
    (-(d_o * d_o + d_a * d_a) / (2.0 * length_scale * length_scale)).exp()
}

/// Gaussian bump over origin distance and view angle, peaking at `1.01`.
pub fn gaussian_landscape_score(pose: &CameraPose, peak: &CameraPose, length_scale: f64) -> f64 {
    kernel(pose, peak, length_scale) + LANDSCAPE_FLOOR
}

/// Highest weighted Gaussian bump among `peaks`.
pub fn multimodal_landscape_score(
    pose: &CameraPose,
    peaks: &[(CameraPose, f64)],
    length_scale: f64,
) -> Result<f64, ScoreError> {
    if peaks.is_empty() {
        return Err(ScoreError::EmptyPeaks);
    }
    let best =
        peaks.iter().map(|(peak, weight)| weight * kernel(pose, peak, length_scale)).fold(f64::NEG_INFINITY, f64::max);
    Ok(best + LANDSCAPE_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLandscape {
    pub peak: CameraPose,
    pub length_scale: f64,
}

impl GaussianLandscape {
    pub fn new(peak: CameraPose, length_scale: f64) -> Result<Self, ScoreError> {
        if !(length_scale > 0.0 && length_scale.is_finite()) {
            return Err(ScoreError::InvalidParameter(format!("length_scale {length_scale}")));
        }
        Ok(Self { peak, length_scale })
    }
}

impl PoseScorer for GaussianLandscape {
    fn name(&self) -> &str {
        "gaussian"
    }

    fn score(&self, pose: &CameraPose) -> Result<f64, ScoreError> {
        Ok(gaussian_landscape_score(pose, &self.peak, self.length_scale))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalLandscape {
    peaks: Vec<(CameraPose, f64)>,
    length_scale: f64,
}

impl MultimodalLandscape {
    pub fn new(peaks: Vec<(CameraPose, f64)>, length_scale: f64) -> Result<Self, ScoreError> {
        if peaks.is_empty() {
            return Err(ScoreError::EmptyPeaks);
        }
        if let Some((_, w)) = peaks.iter().find(|(_, w)| !(*w > 0.0 && w.is_finite())) {
            return Err(ScoreError::InvalidParameter(format!("peak weight {w}")));
        }
        if !(length_scale > 0.0 && length_scale.is_finite()) {
            return Err(ScoreError::InvalidParameter(format!("length_scale {length_scale}")));
        }
        Ok(Self { peaks, length_scale })
    }

    pub fn peaks(&self) -> &[(CameraPose, f64)] {
        &self.peaks
    }
}

impl PoseScorer for MultimodalLandscape {
    fn name(&self) -> &str {
        "multimodal"
    }

    fn score(&self, pose: &CameraPose) -> Result<f64, ScoreError> {
        multimodal_landscape_score(pose, &self.peaks, self.length_scale)
    }
}

#[derive(Serialize)]
struct ExternalRequest<'a> {
    width: u32,
    height: u32,
    pixels_b64: &'a str,
}

#[derive(Deserialize)]
struct ExternalResponse {
    score: serde_json::Value,
}

/// Runs a user-provided executable once per image.
///
/// The request is one JSON line on stdin
/// (`{"width", "height", "pixels_b64"}` with packed RGB bytes); the reply is one
/// JSON line `{"score": number}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalScorer {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub direction: Direction,
}

impl ExternalScorer {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self { program: program.into(), args: Vec::new(), direction: Direction::Maximize }
    }
}

/// Encodes the request line sent to an external scorer (no trailing newline).
pub fn external_request(image: &Image) -> String {
    let b64 = base64::engine::general_purpose::STANDARD.encode(image.to_bytes());
    serde_json::to_string(&ExternalRequest { width: image.width(), height: image.height(), pixels_b64: &b64 })
        .expect("request serializes")
}

/// Parses a reply line; the score must be a finite positive number.
pub fn parse_external_response(line: &str) -> Result<f64, ScoreError> {
    let resp: ExternalResponse = serde_json::from_str(line.trim())
        .map_err(|e| ScoreError::External(format!("malformed response `{}`: {e}", line.trim())))?;
    let value = resp.score.as_f64().ok_or_else(|| ScoreError::External(format!("non-numeric score {}", resp.score)))?;
    positive("external", value)
}

impl Scorer for ExternalScorer {
    fn name(&self) -> &str {
        "external"
    }

    fn direction(&self) -> Direction {
        self.direction
    }

    fn score(&self, image: &Image) -> Result<f64, ScoreError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ScoreError::External(format!("cannot start {}: {e}", self.program.display())))?;
        {
            let mut stdin = child.stdin.take().expect("stdin is piped");
            let mut line = external_request(image);
            line.push('\n');
            // a scorer may reply before reading everything; a broken pipe is not fatal
            let _ = stdin.write_all(line.as_bytes());
        }
        let mut reply = String::new();
        BufReader::new(child.stdout.take().expect("stdout is piped"))
            .read_line(&mut reply)
            .map_err(|e| ScoreError::External(e.to_string()))?;
        let status = child.wait().map_err(|e| ScoreError::External(e.to_string()))?;
        if !status.success() {
            return Err(ScoreError::External(format!("{} exited with {status}", self.program.display())));
        }
        parse_external_response(&reply)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    fn pose(o: Vec3, l: Vec3) -> CameraPose {
        CameraPose::new(o, l, Vec3::Y).unwrap()
    }

    #[test]
    fn salient_count_examples() {
        assert_eq!(salient_pixel_count(&Image::filled(64, 64, Rgb::BLACK), Rgb::RED, 0), 1.0);
        assert_eq!(salient_pixel_count(&Image::filled(64, 64, Rgb::RED), Rgb::RED, 0), 4097.0);
        let near = Image::filled(2, 2, Rgb([250, 4, 0]));
        assert_eq!(salient_pixel_count(&near, Rgb::RED, 4), 1.0);
        assert_eq!(salient_pixel_count(&near, Rgb::RED, 5), 5.0);
    }

    #[test]
    fn salient_count_ignores_pixel_order() {
        let px: Vec<Rgb> = (0..36u8).map(|i| if i % 3 == 0 { Rgb::RED } else { Rgb([i, i, i]) }).collect();
        let mut shuffled = px.clone();
        shuffled.reverse();
        shuffled.rotate_left(7);
        let a = Image::new(6, 6, px).unwrap();
        let b = Image::new(6, 6, shuffled).unwrap();
        assert_eq!(salient_pixel_count(&a, Rgb::RED, 0), salient_pixel_count(&b, Rgb::RED, 0));
    }

    #[test]
    fn gaussian_examples() {
        let peak = pose(Vec3::new(1.0, 2.0, 3.0), -Vec3::Z);
        assert_eq!(gaussian_landscape_score(&peak, &peak, 0.7), 1.01);
        let shifted = peak.with_origin(Vec3::new(1.7, 2.0, 3.0));
        let v = gaussian_landscape_score(&shifted, &peak, 0.7);
        assert!((v - ((-0.5f64).exp() + 0.01)).abs() < 1e-12);
        assert!((v - 0.6165).abs() < 1e-4);
        let mut last = f64::INFINITY;
        for k in 0..20 {
            let p = peak.with_origin(peak.origin() + Vec3::X * (0.1 * k as f64));
            let s = gaussian_landscape_score(&p, &peak, 0.7);
            assert!(s < last);
            last = s;
        }
    }

    #[test]
    fn multimodal_examples() {
        let a = pose(Vec3::ZERO, -Vec3::Z);
        let b = pose(Vec3::new(10.0, 0.0, 0.0), -Vec3::Z);
        let probe = pose(Vec3::new(0.3, -0.2, 0.1), Vec3::new(0.1, 0.0, -1.0));
        assert_eq!(
            multimodal_landscape_score(&probe, &[(a, 1.0)], 1.0).unwrap(),
            gaussian_landscape_score(&probe, &a, 1.0)
        );
        let equal = [(a, 0.8), (b, 0.8)];
        assert_eq!(multimodal_landscape_score(&a, &equal, 1.0).unwrap(), 0.8 + 0.01);
        assert_eq!(multimodal_landscape_score(&b, &equal, 1.0).unwrap(), 0.8 + 0.01);
        let uneven = [(a, 1.0), (b, 0.5)];
        let sa = multimodal_landscape_score(&a, &uneven, 1.0).unwrap();
        let sb = multimodal_landscape_score(&b, &uneven, 1.0).unwrap();
        assert!(sa > sb);
        assert!(matches!(multimodal_landscape_score(&a, &[], 1.0), Err(ScoreError::EmptyPeaks)));
        assert!(matches!(MultimodalLandscape::new(vec![], 1.0), Err(ScoreError::EmptyPeaks)));
        assert!(MultimodalLandscape::new(vec![(a, 0.0)], 1.0).is_err());
    }

    #[test]
    fn external_protocol_encoding() {
        let img = Image::new(2, 1, vec![Rgb([1, 2, 3]), Rgb([4, 5, 6])]).unwrap();
        let req: serde_json::Value = serde_json::from_str(&external_request(&img)).unwrap();
        assert_eq!(req["width"], 2);
        assert_eq!(req["height"], 1);
        let bytes = base64::engine::general_purpose::STANDARD.decode(req["pixels_b64"].as_str().unwrap()).unwrap();
        assert_eq!(bytes, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(parse_external_response("{\"score\": 3.5}\n").unwrap(), 3.5);
        assert!(parse_external_response("{\"score\": \"high\"}").is_err());
        assert!(parse_external_response("{\"score\": 0}").is_err());
        assert!(parse_external_response("{\"score\": -2}").is_err());
        assert!(parse_external_response("nonsense").is_err());
    }

    #[cfg(unix)]
    #[test]
    fn external_scorer_subprocess() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("score.sh");
        std::fs::write(&script, "#!/bin/sh\nread line\necho '{\"score\": 2.5}'\n").unwrap();
        std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();
        let scorer = ExternalScorer::new(&script);
        assert_eq!(scorer.score(&Image::filled(3, 3, Rgb::RED)).unwrap(), 2.5);

        std::fs::write(&script, "#!/bin/sh\nread line\necho '{\"score\": -1}'\n").unwrap();
        assert!(scorer.score(&Image::filled(3, 3, Rgb::RED)).is_err());
        let missing = ExternalScorer::new(dir.path().join("nope"));
        assert!(matches!(missing.score(&Image::filled(1, 1, Rgb::RED)), Err(ScoreError::External(_))));
    }

    #[test]
    fn objectives_reject_non_positive_scores() {
        struct Zero;
        impl PoseScorer for Zero {
            fn name(&self) -> &str {
                "zero"
            }
            fn score(&self, _: &CameraPose) -> Result<f64, ScoreError> {
                Ok(0.0)
            }
        }
        let obj = PoseObjective::new(&Zero);
        assert!(matches!(obj.evaluate(&pose(Vec3::ZERO, -Vec3::Z)), Err(ScoreError::NonPositive { .. })));
    }
}
