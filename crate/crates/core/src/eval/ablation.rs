use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{benchmark_inference, evaluate, EvalError, ModelPredictor};
use crate::data::SceneSample;
use crate::train::{PreparedSet, TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// 1 enables multi-scale fusion, 0 disables it.
    Fusion,
    /// 1 keeps the line-loss terms, 0 zeroes their weights.
    LineLoss,
    /// Width multiplier.
    Alpha,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fusion" => Some(Self::Fusion),
            "line_loss" | "line-loss" => Some(Self::LineLoss),
            "alpha" => Some(Self::Alpha),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Fusion => "fusion",
            Self::LineLoss => "line_loss",
            Self::Alpha => "alpha",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &TrainConfig, value: f64) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Self::Fusion => cfg.model.fusion_enabled = value != 0.0,
            Self::LineLoss => {
                if value == 0.0 {
                    cfg = cfg.without_line_loss();
                }
            }
            Self::Alpha => cfg.model.alpha = value,
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: f64,
    pub seed: u64,
    pub ji: f64,
    pub parameters: usize,
    pub latency_ms: Option<f64>,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub value: f64,
    pub runs: usize,
    pub median_ji: f64,
    pub mean_ji: f64,
    pub min_ji: f64,
    pub max_ji: f64,
    pub parameters: usize,
    pub median_latency_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub base: TrainConfig,
    pub rows: Vec<AblationRow>,
    pub cells: Vec<AblationCell>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl AblationTable {
    pub fn from_rows(axis: AblationAxis, base: TrainConfig, rows: Vec<AblationRow>) -> Self {
        let mut values: Vec<f64> = Vec::new();
        for r in &rows {
            if !values.contains(&r.value) {
                values.push(r.value);
            }
        }
        let cells = values
            .into_iter()
            .map(|value| {
                let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.value == value).collect();
                let mut jis: Vec<f64> = sel.iter().map(|r| r.ji).collect();
                let mut lat: Vec<f64> = sel.iter().filter_map(|r| r.latency_ms).collect();
                AblationCell {
                    value,
                    runs: sel.len(),
                    mean_ji: jis.iter().sum::<f64>() / jis.len() as f64,
                    min_ji: jis.iter().copied().fold(f64::INFINITY, f64::min),
                    max_ji: jis.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    median_ji: median(&mut jis),
                    parameters: sel[0].parameters,
                    median_latency_ms: (!lat.is_empty()).then(|| median(&mut lat)),
                }
            })
            .collect();
        Self {
            axis,
            base,
            rows,
            cells,
        }
    }

    pub fn cell(&self, value: f64) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.value == value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{},seed,ji,parameters,latency_ms,final_loss\n", self.axis.name());
        for r in &self.rows {
            let lat = r.latency_ms.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.value, r.seed, r.ji, r.parameters, lat, r.final_loss
            );
        }
        out
    }
}

/// What to vary and how often to repeat it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub axis: AblationAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Timed frames per trained variant; 0 skips latency measurement.
    pub bench_frames: usize,
}

/// Trains every `(value, seed)` pair on the same prepared training set and
/// scores it on the same test frames. `on_row` sees each finished run.
pub fn run_ablation(
    base: &TrainConfig,
    plan: &AblationPlan,
    train: &PreparedSet,
    test: &[SceneSample],
    on_row: &mut dyn FnMut(&AblationRow),
) -> Result<AblationTable, EvalError> {
    if plan.values.is_empty() || plan.seeds.is_empty() {
        return Err(EvalError::InvalidArgument(
            "an ablation needs at least one value and one seed".into(),
        ));
    }
    if train.side != base.model.input_hw {
        return Err(EvalError::InvalidArgument(format!(
            "training set prepared at {} px but the model expects {}",
            train.side, base.model.input_hw
        )));
    }
    let mut rows = Vec::new();
    for &value in &plan.values {
        for &seed in &plan.seeds {
            let mut cfg = plan.axis.apply(base, value);
            cfg.seed = seed;
            let mut trainer = Trainer::new(cfg)?;
            trainer.fit(train, None, None, &mut |_| {})?;
            let ji = evaluate(&mut ModelPredictor::new(&trainer.ckpt), test).overall_ji;
            let latency_ms = if plan.bench_frames > 0 {
                Some(benchmark_inference(&trainer.ckpt, plan.bench_frames, 5)?.mean_ms)
            } else {
                None
            };
            let row = AblationRow {
                value,
                seed,
                ji,
                parameters: trainer.ckpt.parameter_count(),
                latency_ms,
                final_loss: trainer.metrics.last().map_or(f64::NAN, |m| m.loss.total),
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(AblationTable::from_rows(plan.axis, base.clone(), rows))
}
