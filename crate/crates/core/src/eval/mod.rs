//! Accuracy (Jaccard index per background), latency, ablation and occlusion
//! protocols.

mod ablation;
mod latency;
mod occlusion;
pub mod plot;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Background, DataError, Dataset, SceneSample};
use crate::geometry::{corner_distance, jaccard_index, Point2, Quad};
use crate::model::{predict_quad, Checkpoint, ModelError};
use crate::train::TrainError;

pub use ablation::{run_ablation, AblationAxis, AblationCell, AblationPlan, AblationRow, AblationTable};
pub use latency::{
    benchmark_checkpoint, benchmark_inference, host_descriptor, LatencyReport, FRAME_BUDGET_MS,
};
pub use occlusion::{out_of_frame_check, occlusion_suite, OcclusionCurve, OcclusionPoint, OutOfFrameReport};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Anything that maps a scene to a corner quad (pixel units) and a class.
pub trait Predictor {
    fn predict(&mut self, sample: &SceneSample) -> Result<(Quad, usize), String>;
}

/// Runs a checkpoint, resizing the frame to the model input when needed.
pub struct ModelPredictor<'a> {
    ckpt: &'a Checkpoint,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(ckpt: &'a Checkpoint) -> Self {
        Self { ckpt }
    }
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&mut self, sample: &SceneSample) -> Result<(Quad, usize), String> {
        let s = self.ckpt.config.input_hw;
        let img = sample.image.resize(s, s).to_tensor();
        predict_quad(
            self.ckpt,
            &img,
            sample.label.image_w as f64,
            sample.label.image_h as f64,
        )
        .map_err(|e| e.to_string())
    }
}

/// Returns the ground truth (the full frame for negatives).
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&mut self, sample: &SceneSample) -> Result<(Quad, usize), String> {
        let l = &sample.label;
        let full = Quad::rect(0.0, 0.0, l.image_w as f64, l.image_h as f64);
        Ok((l.corners.unwrap_or(full), l.class))
    }
}

/// Always predicts a centered square covering `fraction` of the shorter
/// image side.
pub struct CenterSquarePredictor {
    pub fraction: f64,
}

impl Predictor for CenterSquarePredictor {
    fn predict(&mut self, sample: &SceneSample) -> Result<(Quad, usize), String> {
        let (w, h) = (sample.label.image_w as f64, sample.label.image_h as f64);
        let side = self.fraction * w.min(h);
        Ok((Quad::rect((w - side) / 2.0, (h - side) / 2.0, side, side), 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub position: usize,
    pub file: Option<String>,
    pub background: Background,
    pub class: usize,
    pub predicted_class: Option<usize>,
    pub ji: f64,
    /// Sum of corner distances in normalized image units.
    pub corner_distance: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundStats {
    pub background: Background,
    pub frames: usize,
    pub mean_ji: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_background: Vec<BackgroundStats>,
    pub overall_ji: f64,
    /// Frames with a document (those that receive a Jaccard index).
    pub frames: usize,
    pub failures: usize,
    /// Frames without a document; they only count toward class accuracy.
    pub negatives: usize,
    pub class_accuracy: f64,
    pub samples: Vec<SampleResult>,
}

fn normalized_corner_distance(pred: &Quad, gt: &Quad, w: f64, h: f64) -> f64 {
    let n = |p: Point2| Point2::new(p.x / w, p.y / h);
    corner_distance(&pred.map(n), &gt.map(n))
}

/// Scores one frame. Frames without a document get no Jaccard index.
pub fn score_sample<P: Predictor + ?Sized>(
    predictor: &mut P,
    sample: &SceneSample,
    position: usize,
    file: Option<String>,
) -> SampleResult {
    let mut r = SampleResult {
        position,
        file,
        background: sample.meta.background,
        class: sample.label.class,
        predicted_class: None,
        ji: 0.0,
        corner_distance: None,
        failure: None,
    };
    let pred = predictor.predict(sample);
    match (&pred, sample.label.corners, sample.label.canonical) {
        (Err(e), _, _) => r.failure = Some(format!("prediction failed: {e}")),
        (Ok((q, c)), Some(gt), canon) => {
            r.predicted_class = Some(*c);
            let (w, h) = (sample.label.image_w as f64, sample.label.image_h as f64);
            r.corner_distance = Some(normalized_corner_distance(q, &gt, w, h));
            match canon.map(|cn| jaccard_index(q, &gt, &cn)) {
                Some(Ok(ji)) => r.ji = ji,
                Some(Err(e)) => r.failure = Some(format!("jaccard index undefined: {e}")),
                None => r.failure = Some("label has no canonical rectangle".into()),
            }
        }
        (Ok((_, c)), None, _) => r.predicted_class = Some(*c),
    }
    r
}

impl EvalReport {
    /// Aggregates per-frame results; negatives are excluded from the
    /// Jaccard statistics.
    pub fn from_results(samples: Vec<SampleResult>) -> Self {
        let mut per = Vec::new();
        let positives: Vec<&SampleResult> = samples.iter().filter(|s| s.class != 0).collect();
        for bg in Background::ALL {
            let jis: Vec<f64> = positives
                .iter()
                .filter(|s| s.background == bg)
                .map(|s| s.ji)
                .collect();
            if !jis.is_empty() {
                per.push(BackgroundStats {
                    background: bg,
                    frames: jis.len(),
                    mean_ji: jis.iter().sum::<f64>() / jis.len() as f64,
                });
            }
        }
        let frames = positives.len();
        let overall_ji = if frames == 0 {
            0.0
        } else {
            positives.iter().map(|s| s.ji).sum::<f64>() / frames as f64
        };
        let failures = samples.iter().filter(|s| s.failure.is_some()).count();
        let correct = samples
            .iter()
            .filter(|s| s.predicted_class == Some(s.class))
            .count();
        Self {
            per_background: per,
            overall_ji,
            frames,
            failures,
            negatives: samples.len() - frames,
            class_accuracy: if samples.is_empty() {
                0.0
            } else {
                correct as f64 / samples.len() as f64
            },
            samples,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("position,file,background,class,predicted_class,ji,corner_distance,failure\n");
        for s in &self.samples {
            let opt = |v: Option<String>| v.unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                s.position,
                opt(s.file.clone()),
                s.background.name(),
                s.class,
                opt(s.predicted_class.map(|c| c.to_string())),
                s.ji,
                opt(s.corner_distance.map(|d| d.to_string())),
                opt(s.failure.as_ref().map(|f| format!("\"{}\"", f.replace('"', "'")))),
            );
        }
        out
    }
}

/// Evaluates in-memory scenes.
pub fn evaluate<P: Predictor + ?Sized>(predictor: &mut P, samples: &[SceneSample]) -> EvalReport {
    let results = samples
        .iter()
        .enumerate()
        .map(|(i, s)| score_sample(predictor, s, i, None))
        .collect();
    EvalReport::from_results(results)
}

/// Evaluates a dataset on disk; unreadable frames count as failures with a
/// Jaccard index of zero.
pub fn evaluate_dataset<P: Predictor + ?Sized>(predictor: &mut P, ds: &Dataset) -> EvalReport {
    let results = (0..ds.len())
        .map(|i| {
            let rec = &ds.labels[i];
            match ds.load(i) {
                Ok(s) => score_sample(predictor, &s, i, Some(rec.file.clone())),
                Err(e) => SampleResult {
                    position: i,
                    file: Some(rec.file.clone()),
                    background: rec.meta.background,
                    class: rec.class,
                    predicted_class: None,
                    ji: 0.0,
                    corner_distance: None,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect();
    EvalReport::from_results(results)
}
