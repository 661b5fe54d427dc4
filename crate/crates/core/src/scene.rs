//! Synthetic scenes, the ray-cast renderer and posed image sets.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{matrix_to_pose, pose_to_matrix, CameraPose, CameraToWorld, GeometryError, Vec3};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
    #[error("{path}: invalid field `{field}`: {message}")]
    Field { path: String, field: String, message: String },
    #[error("frame `{id}`: {source}")]
    Frame {
        id: String,
        #[source]
        source: GeometryError,
    },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

impl SceneError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        SceneError::Io { path: path.display().to_string(), source }
    }

    fn parse(path: &Path, e: serde_json::Error) -> Self {
        SceneError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }

    fn field(path: &Path, field: impl Into<String>, message: impl Into<String>) -> Self {
        SceneError::Field { path: path.display().to_string(), field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(from = "[u8; 3]", into = "[u8; 3]")]
pub struct Rgb(pub [u8; 3]);

impl Rgb {
    pub const BLACK: Rgb = Rgb([0, 0, 0]);
    pub const RED: Rgb = Rgb([255, 0, 0]);

    /// Every channel within `tolerance` of `other`.
    pub fn within(&self, other: &Rgb, tolerance: u8) -> bool {
        self.0.iter().zip(other.0).all(|(a, b)| a.abs_diff(b) <= tolerance)
    }
}

impl From<[u8; 3]> for Rgb {
    fn from(c: [u8; 3]) -> Self {
        Rgb(c)
    }
}

impl From<Rgb> for [u8; 3] {
    fn from(c: Rgb) -> Self {
        c.0
    }
}

/// Row-major 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: u32,
    height: u32,
    pixels: Vec<Rgb>,
}

impl Image {
    pub fn new(width: u32, height: u32, pixels: Vec<Rgb>) -> Option<Self> {
        (width > 0 && height > 0 && pixels.len() == width as usize * height as usize).then_some(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, color: Rgb) -> Self {
        Self { width, height, pixels: vec![color; width as usize * height as usize] }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> Rgb {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    /// Packed RGB bytes, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|p| p.0).collect()
    }

    pub fn from_bytes(width: u32, height: u32, bytes: &[u8]) -> Option<Self> {
        if bytes.len() != width as usize * height as usize * 3 {
            return None;
        }
        Self::new(width, height, bytes.chunks_exact(3).map(|c| Rgb([c[0], c[1], c[2]])).collect())
    }

    /// Writes the image; the format follows the file extension (png, ppm).
    pub fn save(&self, path: &Path) -> Result<(), SceneError> {
        image::save_buffer(path, &self.to_bytes(), self.width, self.height, image::ExtendedColorType::Rgb8)
            .map_err(|source| SceneError::Image { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let img = image::open(path)
            .map_err(|source| SceneError::Image { path: path.display().to_string(), source })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self::from_bytes(w, h, img.as_raw()).expect("rgb8 buffer matches its dimensions"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
    pub color: Rgb,
}

impl Sphere {
    /// Distance along the ray to the first front-facing hit.
    ///
    /// A ray starting inside the sphere never hits it: surfaces are one-sided.
    fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        let oc = origin - self.center;
        let b = oc.dot(dir);
        let c = oc.dot(oc) - self.radius * self.radius;
        if c <= 0.0 {
            return None;
        }
        let disc = b * b - c;
        if disc < 0.0 {
            return None;
        }
        let t = -b - disc.sqrt();
        (t > 0.0).then_some(t)
    }
}

/// A synthetic scene of flat-shaded spheres seen through a pinhole camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default = "format_version")]
    pub format_version: u32,
    pub spheres: Vec<Sphere>,
    pub background: Rgb,
    /// Vertical field of view in degrees.
    pub fov_y: f64,
    /// `(width, height)` in pixels.
    pub resolution: (u32, u32),
}

fn format_version() -> u32 {
    FORMAT_VERSION
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.format_version != FORMAT_VERSION {
            return Err(SceneError::InvalidScene(format!("unsupported format_version {}", self.format_version)));
        }
        if self.spheres.is_empty() {
            return Err(SceneError::InvalidScene("at least one sphere is required".into()));
        }
        for (i, s) in self.spheres.iter().enumerate() {
            if !(s.radius > 0.0 && s.radius.is_finite()) || !s.center.is_finite() {
                return Err(SceneError::InvalidScene(format!("sphere {i} has invalid center or radius")));
            }
        }
        if !(self.fov_y > 0.0 && self.fov_y < 180.0) {
            return Err(SceneError::InvalidScene(format!("fov_y {} not in (0, 180)", self.fov_y)));
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return Err(SceneError::InvalidScene("resolution must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let text = fs::read_to_string(path).map_err(|e| SceneError::io(path, e))?;
        let spec: SceneSpec = serde_json::from_str(&text).map_err(|e| SceneError::parse(path, e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<(), SceneError> {
        let text = serde_json::to_string_pretty(self).expect("scene serializes");
        fs::write(path, text + "\n").map_err(|e| SceneError::io(path, e))
    }

    /// Focal length in pixels for the vertical field of view.
    pub fn focal_px(&self) -> f64 {
        0.5 * self.resolution.1 as f64 / (0.5 * self.fov_y.to_radians()).tan()
    }
}

/// Renders `scene` from `pose`: one ray per pixel centre, nearest sphere wins.
///
/// Rows are rendered in parallel; output is independent of scheduling.
pub fn render(scene: &SceneSpec, pose: &CameraPose) -> Image {
    let (w, h) = scene.resolution;
    let focal = scene.focal_px();
    let (right, up, fwd) = (pose.right(), pose.up(), pose.look_at());
    let origin = pose.origin();
    let mut pixels = vec![scene.background; w as usize * h as usize];
    pixels.par_chunks_mut(w as usize).enumerate().for_each(|(row, out)| {
        let py = 0.5 * h as f64 - (row as f64 + 0.5);
        for (col, px) in out.iter_mut().enumerate() {
            let pxx = (col as f64 + 0.5) - 0.5 * w as f64;
            let dir = (right * pxx + up * py + fwd * focal).normalized().expect("focal length is positive");
            let mut nearest = f64::INFINITY;
            for s in &scene.spheres {
                if let Some(t) = s.intersect(origin, dir) {
                    if t < nearest {
                        nearest = t;
                        *px = s.color;
                    }
                }
            }
        }
    });
    Image { width: w, height: h, pixels }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosedEntry {
    pub id: String,
    pub pose: CameraPose,
    pub file_path: Option<String>,
    pub image: Option<Image>,
}

/// Training views: poses plus optional stored images.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedImageSet {
    pub fov_y: f64,
    pub width: u32,
    pub height: u32,
    pub entries: Vec<PosedEntry>,
}

#[derive(Serialize, Deserialize)]
struct PoseFile {
    #[serde(default = "format_version")]
    format_version: u32,
    frames: Vec<PoseFrame>,
    fov_y: f64,
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct PoseFrame {
    id: String,
    transform_matrix: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    file_path: Option<String>,
}

impl PosedImageSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn poses(&self) -> impl Iterator<Item = &CameraPose> {
        self.entries.iter().map(|e| &e.pose)
    }
}

/// Loads a pose file. Image paths are resolved relative to the file.
pub fn load_posed_set(path: &Path) -> Result<PosedImageSet, SceneError> {
    let text = fs::read_to_string(path).map_err(|e| SceneError::io(path, e))?;
    let file: PoseFile = serde_json::from_str(&text).map_err(|e| SceneError::parse(path, e))?;
    if file.format_version != FORMAT_VERSION {
        return Err(SceneError::field(path, "format_version", format!("unsupported version {}", file.format_version)));
    }
    if !(file.fov_y > 0.0 && file.fov_y < 180.0) {
        return Err(SceneError::field(path, "fov_y", format!("{} not in (0, 180)", file.fov_y)));
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(file.frames.len());
    for (i, frame) in file.frames.into_iter().enumerate() {
        if !seen.insert(frame.id.clone()) {
            return Err(SceneError::field(path, format!("frames[{i}].id"), format!("duplicate id `{}`", frame.id)));
        }
        if frame.transform_matrix.len() != 16 {
            return Err(SceneError::field(
                path,
                format!("frames[{i}].transform_matrix"),
                format!("expected 16 numbers, got {}", frame.transform_matrix.len()),
            ));
        }
        let m = CameraToWorld::from_row_major(&frame.transform_matrix)
            .map_err(|source| SceneError::Frame { id: frame.id.clone(), source })?;
        let pose = matrix_to_pose(&m).map_err(|source| SceneError::Frame { id: frame.id.clone(), source })?;
        let image = match &frame.file_path {
            Some(p) => Some(Image::load(&resolve(&base, p))?),
            None => None,
        };
        entries.push(PosedEntry { id: frame.id, pose, file_path: frame.file_path, image });
    }
    Ok(PosedImageSet { fov_y: file.fov_y, width: file.width, height: file.height, entries })
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Writes a pose file. Stored images are not written, only their paths.
pub fn save_posed_set(set: &PosedImageSet, path: &Path) -> Result<(), SceneError> {
    let file = PoseFile {
        format_version: FORMAT_VERSION,
        frames: set
            .entries
            .iter()
            .map(|e| PoseFrame {
                id: e.id.clone(),
                transform_matrix: pose_to_matrix(&e.pose).to_row_major(),
                file_path: e.file_path.clone(),
            })
            .collect(),
        fov_y: set.fov_y,
        width: set.width,
        height: set.height,
    };
    let text = serde_json::to_string_pretty(&file).expect("pose file serializes");
    fs::write(path, text + "\n").map_err(|e| SceneError::io(path, e))
}

/// `count` pose-only views on a horizontal circle, all aimed at the first sphere.
///
/// The circle is centred above/below the sphere centre at world height `height`;
/// view `k` sits at angle `2πk / count` measured from +x towards +z.
pub fn training_ring(scene: &SceneSpec, count: usize, radius: f64, height: f64) -> Result<PosedImageSet, SceneError> {
    if count < 2 {
        return Err(SceneError::InvalidScene("a training ring needs at least two poses".into()));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(SceneError::InvalidScene(format!("ring radius {radius} must be positive")));
    }
    let center = scene.spheres.first().ok_or_else(|| SceneError::InvalidScene("scene has no spheres".into()))?.center;
    let entries = (0..count)
        .map(|k| {
            let theta = std::f64::consts::TAU * k as f64 / count as f64;
            let origin = Vec3::new(center.x + radius * theta.cos(), height, center.z + radius * theta.sin());
            let id = format!("ring_{k:03}");
            CameraPose::looking_at_point(origin, center, Vec3::Y)
                .map(|pose| PosedEntry { id: id.clone(), pose, file_path: None, image: None })
                .map_err(|source| SceneError::Frame { id, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PosedImageSet { fov_y: scene.fov_y, width: scene.resolution.0, height: scene.resolution.1, entries })
}
