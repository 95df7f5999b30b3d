//! RMSprop training with piecewise-constant learning-rate decay.

mod optim;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::data::{make_training_label, read_dataset, DataError, SceneSample};
use crate::eval::{evaluate, ModelPredictor};
use crate::loss::{total_loss, DetectionLoss, LossBreakdown, LossConfig, LossError, LossTarget};
use crate::model::{
    build_model, decode_tensor_file, encode_tensor_file, forward_graph, register_params, save_checkpoint,
    Checkpoint, ModelConfig, ModelError,
};
use crate::numerics::{finite_difference_check, GradCheckReport, Graph, NodeId, NumericsError, Tensor};

pub use optim::{rmsprop_step, OptimizerState, RmsPropConfig};

pub const STATE_MAGIC: &[u8; 8] = b"LDRSTAT1";
const SHUFFLE_STREAM: u64 = 0x5bu64 << 56;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss or gradient at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training state: {0}")]
    State(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// `(epoch, lr)` pairs, strictly increasing in epoch.
    pub milestones: Vec<(usize, f64)>,
    pub optimizer: RmsPropConfig,
    pub loss: LossConfig,
    pub seed: u64,
    pub data_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub model: ModelConfig,
    /// Validate every this many epochs (and after the last); 0 disables.
    pub eval_every: usize,
    /// Batch shards computed in parallel; results depend on this count but
    /// are deterministic for a fixed value.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            initial_lr: 1e-3,
            milestones: vec![(50, 1e-4), (140, 5e-5), (170, 1e-5)],
            optimizer: RmsPropConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            data_path: None,
            val_path: None,
            model: ModelConfig::desk(),
            eval_every: 10,
            threads: 1,
        }
    }

    pub fn paper() -> Self {
        Self {
            epochs: 1000,
            batch_size: 128,
            initial_lr: 1e-3,
            milestones: vec![(250, 1e-4), (700, 5e-5), (850, 1e-5)],
            model: ModelConfig::paper(),
            eval_every: 50,
            ..Self::desk()
        }
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    /// Changes the epoch count, moving milestones proportionally.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        if epochs != self.epochs && self.epochs > 0 {
            let f = epochs as f64 / self.epochs as f64;
            let mut last = 0;
            self.milestones = self
                .milestones
                .iter()
                .filter_map(|&(e, lr)| {
                    let moved = ((e as f64 * f).round() as usize).max(last + 1);
                    (moved > last).then(|| {
                        last = moved;
                        (moved, lr)
                    })
                })
                .collect();
        }
        self.epochs = epochs;
        self
    }

    pub fn without_line_loss(mut self) -> Self {
        self.loss.weights = self.loss.weights.without_line_loss();
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return bad(format!("initial_lr must be positive, got {}", self.initial_lr));
        }
        if self.milestones.windows(2).any(|w| w[0].0 >= w[1].0) {
            return bad("milestones must be strictly increasing in epoch".into());
        }
        if self.milestones.iter().any(|m| !(m.1.is_finite() && m.1 >= 0.0)) {
            return bad("milestone learning rates must be finite and non-negative".into());
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.rho) || !(0.0..1.0).contains(&o.momentum) || o.epsilon <= 0.0 {
            return bad(format!("invalid RMSprop settings {o:?}"));
        }
        let w = &self.loss.weights;
        if [w.delta, w.beta, w.gamma].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad(format!("loss weights must be non-negative, got {w:?}"));
        }
        self.model.validate()?;
        Ok(())
    }
}

/// Learning rate of the last milestone not after `epoch`, else the initial
/// rate.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.milestones
        .iter()
        .rev()
        .find(|(e, _)| *e <= epoch)
        .map_or(cfg.initial_lr, |(_, lr)| *lr)
}

/// Sample order of one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_STREAM);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Worker count from `LDR_THREADS`, defaulting to one.
pub fn threads_from_env() -> usize {
    std::env::var("LDR_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or(1)
}

/// Training images resized to the model input and their encoded targets.
#[derive(Debug, Clone)]
pub struct PreparedSet {
    pub side: usize,
    pub images: Vec<f32>,
    pub targets: Vec<LossTarget>,
}

impl PreparedSet {
    pub fn new(samples: &[SceneSample], model: &ModelConfig) -> Result<Self, TrainError> {
        let side = model.input_hw;
        let mut images = Vec::with_capacity(samples.len() * side * side * 3);
        let mut targets = Vec::with_capacity(samples.len());
        for s in samples {
            s.image.resize(side, side).extend_normalized(&mut images);
            let t = make_training_label(&s.label, model.n_points)?.to_loss_target();
            if t.class >= model.n_cls {
                return Err(TrainError::InvalidConfig(format!(
                    "sample class {} but the model has {} classes",
                    t.class, model.n_cls
                )));
            }
            targets.push(t);
        }
        Ok(Self {
            side,
            images,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<LossTarget>) {
        let px = self.side * self.side * 3;
        let mut data = Vec::with_capacity(idx.len() * px);
        for &i in idx {
            data.extend_from_slice(&self.images[i * px..(i + 1) * px]);
        }
        let images = Tensor::new(vec![idx.len(), self.side, self.side, 3], data)
            .expect("batch length matches shape");
        (images, idx.iter().map(|&i| self.targets[i].clone()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub val_ji: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,lr,loss_total,loss_reg,loss_cls,loss_sim,loss_dis,val_ji";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let l = &r.loss;
        let ji = r.val_ji.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.lr, l.total, l.reg, l.cls, l.sim, l.dis, ji
        );
    }
    out
}

/// Gradients of the batch-mean total loss and its breakdown.
pub fn loss_and_grads(
    ckpt: &Checkpoint,
    images: &Tensor<f32>,
    targets: &[LossTarget],
    loss: &LossConfig,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor<f32>>), TrainError> {
    let mut g = Graph::<f32>::new();
    let params = register_params(&mut g, ckpt, true);
    let x = g.constant(images.clone());
    let out = forward_graph(&mut g, &ckpt.config, false, &params, x)?;
    let borders = out.borders.expect("training uses the full head");
    let breakdown = total_loss(
        g.value(out.corners),
        g.value(borders),
        g.value(out.logits),
        targets,
        loss,
    )?;
    let op = DetectionLoss {
        targets: targets.to_vec(),
        config: *loss,
    };
    let l = g.custom(Box::new(op), &[out.corners, borders, out.logits])?;
    let mut grads = g.backward(l)?;
    let named = params
        .into_iter()
        .map(|(name, id)| {
            let t = grads
                .take(id)
                .unwrap_or_else(|| Tensor::zeros(ckpt.tensors[&name].shape()));
            (name, t)
        })
        .collect();
    Ok((breakdown, named))
}

/// Finite-difference check of every parameter of `ckpt` under the total
/// loss, evaluated in double precision.
pub fn gradient_check(
    ckpt: &Checkpoint,
    images: &Tensor<f64>,
    targets: &[LossTarget],
    loss: &LossConfig,
    eps: f64,
) -> Result<GradCheckReport, TrainError> {
    ckpt.validate()?;
    let names: Vec<&String> = ckpt.tensors.keys().collect();
    let params: Vec<Tensor<f64>> = ckpt.tensors.values().map(Tensor::cast).collect();
    let report = finite_difference_check(&params, eps, |g, ids| {
        let map: BTreeMap<String, NodeId> = names.iter().map(|n| (*n).clone()).zip(ids.iter().copied()).collect();
        let x = g.constant(images.clone());
        let out = forward_graph(g, &ckpt.config, false, &map, x).map_err(|e| match e {
            ModelError::Numerics(n) => n,
            other => NumericsError::Shape {
                op: "forward_graph",
                detail: other.to_string(),
            },
        })?;
        let borders = out.borders.expect("unpruned forward has borders");
        let op = DetectionLoss {
            targets: targets.to_vec(),
            config: *loss,
        };
        g.custom(Box::new(op), &[out.corners, borders, out.logits])
    })?;
    Ok(report)
}

fn scale_breakdown(l: &LossBreakdown, s: f64) -> LossBreakdown {
    LossBreakdown {
        reg: l.reg * s,
        cls: l.cls * s,
        sim: l.sim * s,
        dis: l.dis * s,
        total: l.total * s,
    }
}

fn add_breakdown(a: &mut LossBreakdown, b: &LossBreakdown) {
    a.reg += b.reg;
    a.cls += b.cls;
    a.sim += b.sim;
    a.dis += b.dis;
    a.total += b.total;
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Where a run writes its artifacts; every path derives from the final
/// checkpoint path.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub checkpoint: PathBuf,
    /// Written as `#` comment lines above the metrics CSV header.
    pub preamble: Option<String>,
}

impl RunPaths {
    pub fn new(checkpoint: impl Into<PathBuf>) -> Self {
        Self {
            checkpoint: checkpoint.into(),
            preamble: None,
        }
    }

    pub fn metrics(&self) -> PathBuf {
        self.checkpoint.with_extension("metrics.csv")
    }

    pub fn state(&self) -> PathBuf {
        self.checkpoint.with_extension("state")
    }

    pub fn milestone(&self, epoch: usize) -> PathBuf {
        self.checkpoint.with_extension(format!("epoch{epoch}.ckpt"))
    }
}

/// Model, optimizer state and progress of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub ckpt: Checkpoint,
    pub state: OptimizerState,
    /// Number of completed epochs.
    pub epoch: usize,
    pub metrics: Vec<EpochMetrics>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let ckpt = build_model(&config.model, config.seed)?;
        let state = OptimizerState::zeros_like(&ckpt.tensors);
        Ok(Self {
            config,
            ckpt,
            state,
            epoch: 0,
            metrics: Vec::new(),
        })
    }

    /// One optimizer update on a batch; returns the batch loss.
    pub fn step(
        &mut self,
        images: &Tensor<f32>,
        targets: &[LossTarget],
        lr: f64,
        batch_index: usize,
    ) -> Result<LossBreakdown, TrainError> {
        let b = targets.len();
        let shards = self.config.threads.clamp(1, b.max(1));
        let (loss, grads) = if shards == 1 {
            loss_and_grads(&self.ckpt, images, targets, &self.config.loss)?
        } else {
            self.sharded_grads(images, targets, shards)?
        };
        let finite = loss.is_finite() && grads.values().all(Tensor::all_finite);
        if !finite {
            return Err(TrainError::NonFinite {
                epoch: self.epoch,
                batch: batch_index,
            });
        }
        rmsprop_step(&mut self.ckpt.tensors, &grads, &mut self.state, lr, &self.config.optimizer)?;
        Ok(loss)
    }

    fn sharded_grads(
        &self,
        images: &Tensor<f32>,
        targets: &[LossTarget],
        shards: usize,
    ) -> Result<(LossBreakdown, BTreeMap<String, Tensor<f32>>), TrainError> {
        let b = targets.len();
        let px = images.len() / b;
        let shape = images.shape();
        let bounds: Vec<(usize, usize)> = (0..shards)
            .map(|s| (s * b / shards, (s + 1) * b / shards))
            .collect();
        let results: Vec<_> = std::thread::scope(|scope| {
            let handles: Vec<_> = bounds
                .iter()
                .map(|&(lo, hi)| {
                    scope.spawn(move || {
                        let data = images.data()[lo * px..hi * px].to_vec();
                        let imgs = Tensor::new(vec![hi - lo, shape[1], shape[2], shape[3]], data)?;
                        loss_and_grads(&self.ckpt, &imgs, &targets[lo..hi], &self.config.loss)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("gradient worker panicked"))
                .collect()
        });
        let mut total = LossBreakdown::default();
        let mut acc: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for (r, &(lo, hi)) in results.into_iter().zip(&bounds) {
            let (l, g) = r?;
            let w = (hi - lo) as f64 / b as f64;
            add_breakdown(&mut total, &scale_breakdown(&l, w));
            for (name, t) in g {
                let scaled = t.map(|v| v * w as f32);
                match acc.get_mut(&name) {
                    Some(a) => a.add_assign(&scaled)?,
                    None => {
                        acc.insert(name, scaled);
                    }
                }
            }
        }
        Ok((total, acc))
    }

    /// Runs the next epoch over `set` in its deterministic shuffled order.
    pub fn run_epoch(&mut self, set: &PreparedSet) -> Result<EpochMetrics, TrainError> {
        if set.is_empty() {
            return Err(TrainError::InvalidConfig("training set is empty".into()));
        }
        let lr = lr_schedule(&self.config, self.epoch);
        let order = epoch_order(self.config.seed, self.epoch, set.len());
        let mut sum = LossBreakdown::default();
        for (bi, idx) in order.chunks(self.config.batch_size).enumerate() {
            let (images, targets) = set.batch(idx);
            let l = self.step(&images, &targets, lr, bi)?;
            add_breakdown(&mut sum, &scale_breakdown(&l, idx.len() as f64));
        }
        let m = EpochMetrics {
            epoch: self.epoch,
            lr,
            loss: scale_breakdown(&sum, 1.0 / set.len() as f64),
            val_ji: None,
        };
        self.epoch += 1;
        Ok(m)
    }

    /// Trains until `config.epochs`, validating periodically and writing
    /// artifacts when `paths` is given. `on_epoch` sees every metrics row.
    pub fn fit(
        &mut self,
        train: &PreparedSet,
        val: Option<&[SceneSample]>,
        paths: Option<&RunPaths>,
        on_epoch: &mut dyn FnMut(&EpochMetrics),
    ) -> Result<(), TrainError> {
        while self.epoch < self.config.epochs {
            let mut m = self.run_epoch(train)?;
            let done = self.epoch;
            let every = self.config.eval_every;
            if let Some(v) = val {
                if every > 0 && (done % every == 0 || done == self.config.epochs) {
                    let mut p = ModelPredictor::new(&self.ckpt);
                    m.val_ji = Some(evaluate(&mut p, v).overall_ji);
                }
            }
            on_epoch(&m);
            self.metrics.push(m);
            if let Some(p) = paths {
                if self.config.milestones.iter().any(|(e, _)| *e == done) {
                    save_checkpoint(&self.ckpt, &p.milestone(done))?;
                }
                let mpath = p.metrics();
                let mut text: String = p
                    .preamble
                    .iter()
                    .flat_map(|c| c.lines())
                    .map(|l| format!("# {l}\n"))
                    .collect();
                text.push_str(&metrics_csv(&self.metrics));
                fs::write(&mpath, text).map_err(io_err(&mpath))?;
                self.save_state(&p.state())?;
            }
        }
        if let Some(p) = paths {
            save_checkpoint(&self.ckpt, &p.checkpoint)?;
        }
        Ok(())
    }

    pub fn state_bytes(&self) -> Vec<u8> {
        let mut fields = Map::new();
        fields.insert("epoch".into(), Value::from(self.epoch));
        fields.insert(
            "config".into(),
            serde_json::to_value(&self.config).expect("config serializes"),
        );
        fields.insert(
            "metrics".into(),
            serde_json::to_value(&self.metrics).expect("metrics serialize"),
        );
        fields.insert("checkpoint_meta".into(), self.ckpt.meta.clone());
        let mut tensors = BTreeMap::new();
        for (k, t) in &self.ckpt.tensors {
            tensors.insert(format!("param/{k}"), t.clone());
        }
        for (k, t) in &self.state.v {
            tensors.insert(format!("v/{k}"), t.clone());
        }
        for (k, t) in &self.state.m {
            tensors.insert(format!("m/{k}"), t.clone());
        }
        encode_tensor_file(STATE_MAGIC, fields, &tensors)
    }

    pub fn save_state(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.state_bytes()).map_err(io_err(path))
    }

    pub fn from_state_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let (mut fields, tensors) = decode_tensor_file(STATE_MAGIC, bytes)?;
        let bad = |m: &str| TrainError::State(m.to_string());
        let epoch = fields
            .get("epoch")
            .and_then(Value::as_u64)
            .ok_or_else(|| bad("missing epoch"))? as usize;
        let config: TrainConfig = serde_json::from_value(fields.remove("config").ok_or_else(|| bad("missing config"))?)
            .map_err(|e| TrainError::State(format!("bad config: {e}")))?;
        let metrics: Vec<EpochMetrics> =
            serde_json::from_value(fields.remove("metrics").unwrap_or(Value::Array(vec![])))
                .map_err(|e| TrainError::State(format!("bad metrics: {e}")))?;
        let mut ckpt = build_model(&config.model, config.seed)?;
        ckpt.meta = fields.remove("checkpoint_meta").unwrap_or(Value::Null);
        let mut state = OptimizerState::default();
        for (k, t) in tensors {
            if let Some(n) = k.strip_prefix("param/") {
                ckpt.tensors.insert(n.to_string(), t);
            } else if let Some(n) = k.strip_prefix("v/") {
                state.v.insert(n.to_string(), t);
            } else if let Some(n) = k.strip_prefix("m/") {
                state.m.insert(n.to_string(), t);
            } else {
                return Err(TrainError::State(format!("unexpected tensor `{k}`")));
            }
        }
        ckpt.validate()?;
        Ok(Self {
            config,
            ckpt,
            state,
            epoch,
            metrics,
        })
    }

    pub fn load_state(path: &Path) -> Result<Self, TrainError> {
        Self::from_state_bytes(&fs::read(path).map_err(io_err(path))?)
    }
}

/// Loads `config.data_path` (and `val_path` when set), trains from scratch
/// and returns the final model with its metrics.
pub fn train(
    config: &TrainConfig,
    paths: Option<&RunPaths>,
) -> Result<(Checkpoint, Vec<EpochMetrics>), TrainError> {
    config.validate()?;
    let data = config
        .data_path
        .as_ref()
        .ok_or_else(|| TrainError::InvalidConfig("no dataset path".into()))?;
    let samples = read_dataset(data)?;
    let set = PreparedSet::new(&samples, &config.model)?;
    let val = config.val_path.as_ref().map(|p| read_dataset(p)).transpose()?;
    let mut trainer = Trainer::new(config.clone())?;
    trainer.fit(&set, val.as_deref(), paths, &mut |_| {})?;
    Ok((trainer.ckpt, trainer.metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneConfig};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            stage_channels: [8, 8, 8, 8, 8],
            tail_channels: 16,
            fused_width: 16,
            input_hw: 32,
            n_points: 8,
            ..ModelConfig::desk()
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            model: tiny_model(),
            eval_every: 0,
            ..TrainConfig::desk()
        }
    }

    fn tiny_set(n: u64) -> (Vec<SceneSample>, PreparedSet) {
        let cfg = SceneConfig {
            image_hw: 32,
            negative_prob: 0.2,
            ..SceneConfig::default()
        };
        let samples: Vec<SceneSample> = (0..n).map(|i| generate_scene(&cfg, i).unwrap()).collect();
        let set = PreparedSet::new(&samples, &tiny_model()).unwrap();
        (samples, set)
    }

    #[test]
    fn paper_schedule() {
        let cfg = TrainConfig::paper();
        assert_eq!(lr_schedule(&cfg, 0), 0.001);
        assert_eq!(lr_schedule(&cfg, 249), 0.001);
        assert_eq!(lr_schedule(&cfg, 250), 0.0001);
        assert_eq!(lr_schedule(&cfg, 700), 0.00005);
        assert_eq!(lr_schedule(&cfg, 850), 0.00001);
        assert_eq!(lr_schedule(&cfg, 999), 0.00001);
        assert_eq!((cfg.batch_size, cfg.epochs), (128, 1000));
        assert_eq!(cfg.model.alpha, 0.35);
        assert_eq!(cfg.optimizer, RmsPropConfig { rho: 0.9, momentum: 0.0, epsilon: 1e-7 });
    }

    #[test]
    fn rescaled_milestones_stay_increasing() {
        let cfg = TrainConfig::desk().with_epochs(4);
        assert_eq!(cfg.epochs, 4);
        assert!(cfg.milestones.windows(2).all(|w| w[0].0 < w[1].0));
        cfg.validate().unwrap();
        assert_eq!(TrainConfig::paper().with_epochs(200).milestones, TrainConfig::desk().milestones);
    }

    #[test]
    fn bad_milestones_rejected() {
        let cfg = TrainConfig {
            milestones: vec![(5, 1e-4), (5, 1e-5)],
            ..TrainConfig::desk()
        };
        assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(_))));
    }

    #[test]
    fn shuffle_is_pure_permutation() {
        let a = epoch_order(3, 7, 50);
        assert_eq!(a, epoch_order(3, 7, 50));
        assert_ne!(a, epoch_order(3, 8, 50));
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn one_epoch_smoke() {
        let (_, set) = tiny_set(8);
        let mut t = Trainer::new(TrainConfig { epochs: 1, ..tiny_config() }).unwrap();
        t.fit(&set, None, None, &mut |_| {}).unwrap();
        assert_eq!(t.metrics.len(), 1);
        assert!(t.metrics[0].loss.is_finite());
        let csv = metrics_csv(&t.metrics);
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with(METRICS_HEADER));
    }

    #[test]
    fn training_is_deterministic() {
        let (_, set) = tiny_set(10);
        let run = || {
            let mut t = Trainer::new(tiny_config()).unwrap();
            t.fit(&set, None, None, &mut |_| {}).unwrap();
            t.ckpt
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (_, set) = tiny_set(10);
        let mut full = Trainer::new(tiny_config()).unwrap();
        full.fit(&set, None, None, &mut |_| {}).unwrap();

        let mut first = Trainer::new(tiny_config()).unwrap();
        first.run_epoch(&set).unwrap();
        let mut resumed = Trainer::from_state_bytes(&first.state_bytes()).unwrap();
        assert_eq!(resumed.epoch, 1);
        resumed.fit(&set, None, None, &mut |_| {}).unwrap();
        assert_eq!(resumed.ckpt, full.ckpt);
        assert_eq!(resumed.state, full.state);
    }

    #[test]
    fn sharded_gradients_match_within_roundoff() {
        let (_, set) = tiny_set(6);
        let (images, targets) = set.batch(&[0, 1, 2, 3, 4, 5]);
        let one = Trainer::new(tiny_config()).unwrap();
        let three = Trainer::new(TrainConfig { threads: 3, ..tiny_config() }).unwrap();
        let (l1, g1) = loss_and_grads(&one.ckpt, &images, &targets, &one.config.loss).unwrap();
        let (l3, g3) = three.sharded_grads(&images, &targets, 3).unwrap();
        assert!((l1.total - l3.total).abs() < 1e-6);
        for (k, a) in &g1 {
            for (x, y) in a.data().iter().zip(g3[k].data()) {
                assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()), "{k}");
            }
        }
    }

    #[test]
    fn non_finite_input_aborts_with_location() {
        let (_, mut set) = tiny_set(8);
        set.images[5] = f32::NAN;
        let mut t = Trainer::new(TrainConfig { epochs: 1, ..tiny_config() }).unwrap();
        let err = t.fit(&set, None, None, &mut |_| {}).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { epoch: 0, .. }), "{err}");
    }

    #[test]
    fn artifacts_are_written() {
        let (val, set) = tiny_set(8);
        let dir = tempfile::tempdir().unwrap();
        let paths = RunPaths::new(dir.path().join("model.ckpt"));
        let cfg = TrainConfig {
            epochs: 3,
            milestones: vec![(2, 1e-4)],
            eval_every: 2,
            ..tiny_config()
        };
        let mut t = Trainer::new(cfg).unwrap();
        t.fit(&set, Some(&val), Some(&paths), &mut |_| {}).unwrap();
        assert!(paths.checkpoint.exists() && paths.milestone(2).exists() && paths.state().exists());
        let csv = fs::read_to_string(paths.metrics()).unwrap();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows.len(), 4);
        assert!(rows[1].ends_with(','));
        assert!(!rows[2].ends_with(','));
        assert!(!rows[3].ends_with(','));
        let back = Trainer::load_state(&paths.state()).unwrap();
        assert_eq!(back.ckpt, t.ckpt);
    }
}
