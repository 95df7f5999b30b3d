//! Synthetic document scenes, training labels and the on-disk dataset
//! format.

mod image;
mod io;
mod render;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{equal_division_points, GeometryError, Point2, PointRing, Quad};
use crate::loss::LossTarget;
use crate::model::encode_coord;

pub use image::RgbImage;
pub use io::{
    decode_ppm, encode_ppm, read_dataset, read_ppm, write_dataset, write_ppm, Dataset, DatasetIndex,
    FileEntry, LabelRecord,
};
pub use render::{generate_scene, generate_scene_with, occlusion_sweep, Occlusion};

/// Occlusion fractions of the robustness sweep.
pub const SWEEP_FRACTIONS: [f64; 4] = [0.0, 0.05, 0.1, 0.2];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("scene {index}: no valid document quad after {attempts} attempts")]
    Degenerate { index: u64, attempts: usize },
    #[error("degenerate label quad: {0}")]
    DegenerateLabel(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },
    #[error("sample `{file}`: {reason}")]
    Sample { file: String, reason: String },
    #[error("refusing to write into non-empty directory {0}")]
    NotEmpty(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Flat,
    Gradient,
    Checker,
    Noise,
    Stripes,
}

impl Background {
    pub const ALL: [Background; 5] = [
        Background::Flat,
        Background::Gradient,
        Background::Checker,
        Background::Noise,
        Background::Stripes,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Background::Flat => "flat",
            Background::Gradient => "gradient",
            Background::Checker => "checker",
            Background::Noise => "noise",
            Background::Stripes => "stripes",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_hw: usize,
    pub n_cls: usize,
    /// Document height over width.
    pub aspect_range: [f64; 2],
    /// Document width as a fraction of the frame side.
    pub scale_range: [f64; 2],
    /// Per-corner perspective displacement as a fraction of document width.
    pub perspective_jitter: f64,
    pub max_rotation_deg: f64,
    pub occlusion_prob: f64,
    /// Largest occluder radius relative to the mean document side.
    pub occlusion_max_fraction: f64,
    pub out_of_frame_prob: f64,
    pub negative_prob: f64,
    pub backgrounds: Vec<Background>,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_hw: 64,
            n_cls: 2,
            aspect_range: [0.75, 1.45],
            scale_range: [0.45, 0.75],
            perspective_jitter: 0.08,
            max_rotation_deg: 20.0,
            occlusion_prob: 0.2,
            occlusion_max_fraction: 0.2,
            out_of_frame_prob: 0.3,
            negative_prob: 0.05,
            backgrounds: Background::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        for (name, p) in [
            ("occlusion_prob", self.occlusion_prob),
            ("out_of_frame_prob", self.out_of_frame_prob),
            ("negative_prob", self.negative_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(0.0..=0.5).contains(&self.occlusion_max_fraction) {
            return bad(format!(
                "occlusion_max_fraction must lie in [0, 0.5], got {}",
                self.occlusion_max_fraction
            ));
        }
        if self.image_hw < 8 {
            return bad(format!("image_hw must be at least 8, got {}", self.image_hw));
        }
        if self.n_cls < 2 {
            return bad(format!("n_cls must be at least 2, got {}", self.n_cls));
        }
        let range_ok = |r: [f64; 2], lo: f64, hi: f64| lo < r[0] && r[0] <= r[1] && r[1] <= hi;
        if !range_ok(self.aspect_range, 0.0, 4.0) {
            return bad(format!("aspect_range {:?} out of (0, 4]", self.aspect_range));
        }
        if !range_ok(self.scale_range, 0.05, 0.95) {
            return bad(format!("scale_range {:?} out of (0.05, 0.95]", self.scale_range));
        }
        if !(0.0..=0.25).contains(&self.perspective_jitter) {
            return bad(format!(
                "perspective_jitter must lie in [0, 0.25], got {}",
                self.perspective_jitter
            ));
        }
        if !(0.0..=180.0).contains(&self.max_rotation_deg) {
            return bad(format!(
                "max_rotation_deg must lie in [0, 180], got {}",
                self.max_rotation_deg
            ));
        }
        if self.backgrounds.is_empty() {
            return bad("at least one background family is required".into());
        }
        Ok(())
    }
}

/// Ordered document annotation in pixel units. Negative frames carry no
/// corners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadLabel {
    pub corners: Option<Quad>,
    pub class: usize,
    /// Undistorted document rectangle used to remove perspective for the
    /// Jaccard index.
    pub canonical: Option<Quad>,
    pub image_w: usize,
    pub image_h: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub index: u64,
    pub occlusion_fraction: f64,
    pub occluded_corner: Option<usize>,
    pub out_of_frame: bool,
    pub background: Background,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: RgbImage,
    pub label: QuadLabel,
    pub meta: SampleMeta,
}

/// Encoded training target: a ring of `N` points in the model's output
/// space, or none for negative frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLabel {
    pub ring: Option<PointRing>,
    pub class: usize,
}

impl TrainingLabel {
    pub fn to_loss_target(&self) -> LossTarget {
        LossTarget {
            ring: self
                .ring
                .as_ref()
                .map(|r| r.points().iter().map(|p| [p.x, p.y]).collect()),
            class: self.class,
        }
    }
}

/// Equal-division ring of the label quad, normalized by the image size and
/// mapped through the coordinate encoding.
pub fn make_training_label(label: &QuadLabel, n_points: usize) -> Result<TrainingLabel, DataError> {
    let Some(quad) = label.corners else {
        return Ok(TrainingLabel {
            ring: None,
            class: label.class,
        });
    };
    if !quad.is_finite() || quad.signed_area() <= 1e-9 || !quad.is_convex_ccw() {
        return Err(DataError::DegenerateLabel(format!(
            "corners {:?} are not a convex counter-clockwise quad",
            <[[f64; 2]; 4]>::from(quad)
        )));
    }
    let (w, h) = (label.image_w as f64, label.image_h as f64);
    let ring = equal_division_points(&quad, n_points)?
        .map(|p| Point2::new(encode_coord(p.x / w), encode_coord(p.y / h)));
    Ok(TrainingLabel {
        ring: Some(ring),
        class: label.class,
    })
}
