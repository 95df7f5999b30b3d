use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::data::{generate_scene, SceneConfig};
use crate::model::{predict_quad, prune_for_inference, Checkpoint};
use crate::numerics::Tensor;

/// Per-frame budget for real-time operation at 30 frames per second.
pub const FRAME_BUDGET_MS: f64 = 1000.0 / 30.0;

const BENCH_SEED: u64 = 0xbe7c;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
    pub parameter_count: usize,
    pub within_budget: bool,
    pub pruned: bool,
    pub input_hw: usize,
    pub warmup: usize,
    pub host: String,
}

/// CPU model, logical core count, OS and architecture of this machine.
pub fn host_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{cpu}; {cores} logical cores; {}-{}",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Times `predict_quad` on `ckpt` exactly as given, over synthetic frames
/// prepared in memory beforehand.
pub fn benchmark_checkpoint(
    ckpt: &Checkpoint,
    n_frames: usize,
    warmup: usize,
) -> Result<LatencyReport, EvalError> {
    if n_frames < 30 || warmup < 5 {
        return Err(EvalError::InvalidArgument(format!(
            "need at least 30 timed frames and 5 warm-up frames, got {n_frames} and {warmup}"
        )));
    }
    let s = ckpt.config.input_hw;
    let scene = SceneConfig {
        image_hw: s,
        seed: BENCH_SEED,
        ..SceneConfig::default()
    };
    let frames: Vec<Tensor<f32>> = (0..(n_frames + warmup) as u64)
        .map(|i| generate_scene(&scene, i).map(|f| f.image.to_tensor()))
        .collect::<Result<_, _>>()?;
    let (w, h) = (s as f64, s as f64);
    for f in &frames[..warmup] {
        predict_quad(ckpt, f, w, h)?;
    }
    let mut samples = Vec::with_capacity(n_frames);
    for f in &frames[warmup..] {
        let t0 = Instant::now();
        let out = predict_quad(ckpt, f, w, h)?;
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let mean_ms = samples.iter().sum::<f64>() / samples.len() as f64;
    Ok(LatencyReport {
        mean_ms,
        p50_ms: percentile(&sorted, 0.5),
        p95_ms: percentile(&sorted, 0.95),
        fps: 1000.0 / mean_ms,
        parameter_count: ckpt.parameter_count(),
        within_budget: mean_ms < FRAME_BUDGET_MS,
        pruned: ckpt.pruned,
        input_hw: s,
        warmup,
        host: host_descriptor(),
        samples_ms: samples,
    })
}

/// Prunes `ckpt` for inference and times it.
pub fn benchmark_inference(
    ckpt: &Checkpoint,
    n_frames: usize,
    warmup: usize,
) -> Result<LatencyReport, EvalError> {
    let pruned = if ckpt.pruned {
        ckpt.clone()
    } else {
        prune_for_inference(ckpt)?
    };
    benchmark_checkpoint(&pruned, n_frames, warmup)
}
