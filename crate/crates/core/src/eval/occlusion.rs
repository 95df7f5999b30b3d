use serde::{Deserialize, Serialize};

use super::{score_sample, EvalError, Predictor};
use crate::data::{SceneSample, SWEEP_FRACTIONS};
use crate::geometry::Point2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionPoint {
    pub fraction: f64,
    pub frames: usize,
    pub mean_ji: f64,
    pub mean_corner_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionCurve {
    pub points: Vec<OcclusionPoint>,
}

impl OcclusionCurve {
    pub fn at(&self, fraction: f64) -> Option<&OcclusionPoint> {
        self.points.iter().find(|p| (p.fraction - fraction).abs() < 1e-9)
    }
}

fn sweep_bucket(fraction: f64) -> Option<usize> {
    SWEEP_FRACTIONS.iter().position(|f| (f - fraction).abs() < 1e-9)
}

/// Mean Jaccard index and corner distance per sweep fraction. Every
/// positive sample must carry one of the sweep fractions.
pub fn occlusion_suite<P: Predictor + ?Sized>(
    predictor: &mut P,
    samples: &[SceneSample],
) -> Result<OcclusionCurve, EvalError> {
    let mut sums = [(0usize, 0.0f64, 0.0f64); SWEEP_FRACTIONS.len()];
    for (i, s) in samples.iter().enumerate() {
        if s.label.class == 0 {
            continue;
        }
        let b = sweep_bucket(s.meta.occlusion_fraction).ok_or_else(|| {
            EvalError::InvalidArgument(format!(
                "sample {i} has occlusion fraction {} outside the sweep {SWEEP_FRACTIONS:?}",
                s.meta.occlusion_fraction
            ))
        })?;
        let r = score_sample(predictor, s, i, None);
        sums[b].0 += 1;
        sums[b].1 += r.ji;
        sums[b].2 += r.corner_distance.unwrap_or(f64::NAN);
    }
    let points = SWEEP_FRACTIONS
        .iter()
        .zip(sums)
        .filter(|(_, (n, _, _))| *n > 0)
        .map(|(&fraction, (n, ji, d))| OcclusionPoint {
            fraction,
            frames: n,
            mean_ji: ji / n as f64,
            mean_corner_distance: d / n as f64,
        })
        .collect();
    Ok(OcclusionCurve { points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutOfFrameReport {
    /// Positive frames with at least one corner outside the image.
    pub frames: usize,
    /// Ground-truth corners outside the image.
    pub corners_outside: usize,
    /// Of those, corners whose prediction also lies outside the image.
    pub predicted_outside: usize,
    pub rate: f64,
    pub mean_ji: f64,
}

fn outside(p: Point2, w: f64, h: f64) -> bool {
    p.x < 0.0 || p.y < 0.0 || p.x > w || p.y > h
}

/// How often corners that truly lie beyond the frame are also predicted
/// beyond it.
pub fn out_of_frame_check<P: Predictor + ?Sized>(
    predictor: &mut P,
    samples: &[SceneSample],
) -> OutOfFrameReport {
    let (mut frames, mut total, mut hit, mut ji) = (0, 0, 0, 0.0);
    for (i, s) in samples.iter().enumerate() {
        let Some(gt) = s.label.corners else { continue };
        let (w, h) = (s.label.image_w as f64, s.label.image_h as f64);
        let out: Vec<usize> = (0..4).filter(|&k| outside(gt.corners[k], w, h)).collect();
        if out.is_empty() {
            continue;
        }
        frames += 1;
        total += out.len();
        ji += score_sample(predictor, s, i, None).ji;
        if let Ok((q, _)) = predictor.predict(s) {
            hit += out.iter().filter(|&&k| outside(q.corners[k], w, h)).count();
        }
    }
    OutOfFrameReport {
        frames,
        corners_outside: total,
        predicted_outside: hit,
        rate: if total == 0 { 0.0 } else { hit as f64 / total as f64 },
        mean_ji: if frames == 0 { 0.0 } else { ji / frames as f64 },
    }
}
