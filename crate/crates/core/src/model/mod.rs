//! Width-scalable depthwise-separable backbone with a five-tap fusion
//! module and a single dense head emitting corners, border points and class
//! logits.

mod checkpoint;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point2, Quad};
use crate::numerics::{Graph, NodeId, NumericsError, Padding, Scalar, Tensor};

pub use checkpoint::{
    decode_tensor_file, encode_tensor_file, load_checkpoint, read_tensor_file, save_checkpoint,
    write_tensor_file, CHECKPOINT_MAGIC, FORMAT_VERSION,
};

/// Lowest representable normalized coordinate.
pub const COORD_MIN: f64 = -0.2;
/// Highest representable normalized coordinate.
pub const COORD_MAX: f64 = 1.2;
const COORD_SPAN: f64 = COORD_MAX - COORD_MIN;

/// Number of backbone stages (and fusion taps).
pub const STAGES: usize = 5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {got:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("unexpected tensor `{0}` in checkpoint")]
    UnexpectedTensor(String),
    #[error("input images must be [B, {expected}, {expected}, 3], got {got:?}")]
    InputShape { expected: usize, got: Vec<usize> },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Maps a normalized coordinate into the sigmoid's open range.
pub fn encode_coord(y: f64) -> f64 {
    (y.clamp(COORD_MIN, COORD_MAX) - COORD_MIN) / COORD_SPAN
}

pub fn decode_coord(v: f64) -> f64 {
    v * COORD_SPAN + COORD_MIN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub alpha: f64,
    pub n_points: usize,
    pub n_cls: usize,
    pub input_hw: usize,
    pub fusion_enabled: bool,
    pub stage_channels: [usize; STAGES],
    pub fused_width: usize,
    pub tail_channels: usize,
    /// Stride-1 depthwise-separable blocks appended to each stage.
    #[serde(default)]
    pub extra_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            alpha: 1.0,
            n_points: 28,
            n_cls: 2,
            input_hw: 64,
            fusion_enabled: true,
            stage_channels: [8, 16, 32, 48, 64],
            fused_width: 128,
            tail_channels: 128,
            extra_blocks: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            alpha: 0.35,
            n_points: 100,
            n_cls: 2,
            input_hw: 224,
            fusion_enabled: true,
            stage_channels: [16, 24, 32, 96, 320],
            fused_width: 256,
            tail_channels: 1280,
            extra_blocks: 1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.n_points < 8 || self.n_points % 4 != 0 {
            return bad(format!(
                "n_points must be a multiple of 4 and at least 8, got {}",
                self.n_points
            ));
        }
        if self.n_cls < 2 {
            return bad(format!("n_cls must be at least 2, got {}", self.n_cls));
        }
        let reduction = 1 << STAGES;
        if self.input_hw == 0 || self.input_hw % reduction != 0 {
            return bad(format!(
                "input_hw must be a positive multiple of {reduction}, got {}",
                self.input_hw
            ));
        }
        if self.stage_channels.contains(&0) || self.tail_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.fusion_enabled && self.fused_width == 0 {
            return bad("fused_width must be positive when fusion is enabled".into());
        }
        Ok(())
    }

    /// Channel count of each stage after width scaling.
    pub fn stage_widths(&self) -> [usize; STAGES] {
        self.stage_channels
            .map(|c| ((self.alpha * c as f64).round() as usize).max(8))
    }

    /// Spatial side of tap `s`.
    pub fn tap_side(&self, s: usize) -> usize {
        self.input_hw >> (s + 1)
    }

    /// Channels of the five fusion taps, shallow to deep. The deepest tap is
    /// the tail.
    pub fn tap_widths(&self) -> [usize; STAGES] {
        let w = self.stage_widths();
        [w[0], w[1], w[2], w[3], self.tail_channels]
    }

    pub fn head_inputs(&self) -> usize {
        if self.fusion_enabled {
            self.fused_width
        } else {
            self.tail_channels
        }
    }

    pub fn border_values(&self) -> usize {
        2 * (self.n_points - 4)
    }

    /// Width of the full dense head: corners, border points, logits.
    pub fn head_outputs(&self, pruned: bool) -> usize {
        if pruned {
            8 + self.n_cls
        } else {
            8 + self.border_values() + self.n_cls
        }
    }

    /// Every tensor the architecture needs, in construction order.
    pub fn parameter_shapes(&self, pruned: bool) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let widths = self.stage_widths();
        let mut cin = 3;
        for (s, &c) in widths.iter().enumerate() {
            out.push((format!("stage{s}.dw.weight"), vec![3, 3, cin]));
            out.push((format!("stage{s}.pw.weight"), vec![1, 1, cin, c]));
            out.push((format!("stage{s}.pw.bias"), vec![c]));
            for e in 0..self.extra_blocks {
                out.push((format!("stage{s}.extra{e}.dw.weight"), vec![3, 3, c]));
                out.push((format!("stage{s}.extra{e}.pw.weight"), vec![1, 1, c, c]));
                out.push((format!("stage{s}.extra{e}.pw.bias"), vec![c]));
            }
            cin = c;
        }
        out.push(("tail.weight".into(), vec![1, 1, cin, self.tail_channels]));
        out.push(("tail.bias".into(), vec![self.tail_channels]));
        if self.fusion_enabled {
            for (t, &c) in self.tap_widths().iter().enumerate() {
                out.push((format!("fusion.proj{t}.weight"), vec![1, 1, c, self.fused_width]));
            }
        }
        let k = self.head_outputs(pruned);
        out.push(("head.weight".into(), vec![self.head_inputs(), k]));
        out.push(("head.bias".into(), vec![k]));
        out
    }

    pub fn parameter_count(&self, pruned: bool) -> usize {
        self.parameter_shapes(pruned)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub format_version: u32,
    pub pruned: bool,
    /// Free-form provenance (for example the command that produced it).
    pub meta: serde_json::Value,
}

impl Checkpoint {
    /// Checks that exactly the tensors the config requires are present with
    /// the right shapes.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        let shapes = self.config.parameter_shapes(self.pruned);
        for (name, shape) in &shapes {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::TensorShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
        if self.tensors.len() != shapes.len() {
            let known: Vec<&String> = shapes.iter().map(|(n, _)| n).collect();
            if let Some(extra) = self.tensors.keys().find(|k| !known.contains(k)) {
                return Err(ModelError::UnexpectedTensor(extra.clone()));
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>, ModelError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::MissingTensor(name.to_string()))
    }
}

/// Fresh weights: He-uniform for convolutions feeding a relu6, Xavier-uniform
/// for the linear fusion projections and the dense head, zero biases.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Checkpoint, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in config.parameter_shapes(false) {
        let len: usize = shape.iter().product();
        let limit = if name.ends_with(".bias") {
            0.0
        } else if name.contains(".dw.") {
            (6.0 / 9.0f64).sqrt()
        } else if name.starts_with("fusion.") || name == "head.weight" {
            let (fan_in, fan_out) = (shape[shape.len() - 2], shape[shape.len() - 1]);
            (6.0 / (fan_in + fan_out) as f64).sqrt()
        } else {
            (6.0 / shape[shape.len() - 2] as f64).sqrt()
        };
        let data: Vec<f32> = (0..len)
            .map(|_| {
                if limit == 0.0 {
                    0.0
                } else {
                    rng.gen_range(-limit..limit) as f32
                }
            })
            .collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    Ok(Checkpoint {
        config: config.clone(),
        tensors,
        format_version: FORMAT_VERSION,
        pruned: false,
        meta: serde_json::Value::Null,
    })
}

/// Graph handles of the three output branches.
#[derive(Debug, Clone, Copy)]
pub struct OutputNodes {
    /// Encoded corner coordinates `[B, 8]` after the sigmoid.
    pub corners: NodeId,
    /// Encoded border coordinates `[B, 2(N-4)]`; absent on pruned models.
    pub borders: Option<NodeId>,
    pub logits: NodeId,
}

/// Adds every checkpoint tensor to `g` as a trainable leaf or a constant.
pub fn register_params<T: Scalar>(
    g: &mut Graph<T>,
    ckpt: &Checkpoint,
    trainable: bool,
) -> BTreeMap<String, NodeId> {
    ckpt.tensors
        .iter()
        .map(|(name, t)| {
            let v = t.cast::<T>();
            let id = if trainable { g.param(v) } else { g.constant(v) };
            (name.clone(), id)
        })
        .collect()
}

fn lookup(params: &BTreeMap<String, NodeId>, name: &str) -> Result<NodeId, ModelError> {
    params
        .get(name)
        .copied()
        .ok_or_else(|| ModelError::MissingTensor(name.to_string()))
}

fn separable<T: Scalar>(
    g: &mut Graph<T>,
    params: &BTreeMap<String, NodeId>,
    prefix: &str,
    x: NodeId,
    stride: usize,
) -> Result<NodeId, ModelError> {
    let dw = lookup(params, &format!("{prefix}.dw.weight"))?;
    let pw = lookup(params, &format!("{prefix}.pw.weight"))?;
    let pb = lookup(params, &format!("{prefix}.pw.bias"))?;
    let h = g.depthwise_conv2d(x, dw, stride, Padding::Same)?;
    let h = g.conv2d(h, pw, 1, Padding::Same)?;
    let h = g.channel_bias(h, pb)?;
    Ok(g.relu6(h))
}

/// Backbone taps, shallow to deep: the outputs of stages 1 to 4 and the
/// tail applied to stage 5.
pub fn backbone<T: Scalar>(
    g: &mut Graph<T>,
    config: &ModelConfig,
    params: &BTreeMap<String, NodeId>,
    images: NodeId,
) -> Result<[NodeId; STAGES], ModelError> {
    let mut taps = [images; STAGES];
    let mut x = images;
    for (s, tap) in taps.iter_mut().enumerate() {
        x = separable(g, params, &format!("stage{s}"), x, 2)?;
        for e in 0..config.extra_blocks {
            x = separable(g, params, &format!("stage{s}.extra{e}"), x, 1)?;
        }
        *tap = x;
    }
    let tw = lookup(params, "tail.weight")?;
    let tb = lookup(params, "tail.bias")?;
    let t = g.conv2d(x, tw, 1, Padding::Same)?;
    let t = g.channel_bias(t, tb)?;
    taps[STAGES - 1] = g.relu6(t);
    Ok(taps)
}

/// Pools every tap to the deepest tap's side, projects each to the fused
/// width, sums them in `order` and global-average-pools to `[B, C_f]`.
pub fn fuse_features<T: Scalar>(
    g: &mut Graph<T>,
    params: &BTreeMap<String, NodeId>,
    taps: &[NodeId; STAGES],
    order: [usize; STAGES],
) -> Result<NodeId, ModelError> {
    let [_, side_h, side_w, _] = g.value(taps[STAGES - 1]).dims4("fuse_features")?;
    let mut projected = Vec::with_capacity(STAGES);
    for (t, &tap) in taps.iter().enumerate() {
        let pooled = g.avg_pool_to(tap, side_h, side_w)?;
        let w = lookup(params, &format!("fusion.proj{t}.weight"))?;
        projected.push(g.conv2d(pooled, w, 1, Padding::Valid)?);
    }
    let mut acc = projected[order[0]];
    for &i in &order[1..] {
        acc = g.add(acc, projected[i])?;
    }
    let pooled = g.global_avg_pool(acc)?;
    let b = g.value(pooled).shape()[0];
    let c = g.value(pooled).shape()[3];
    Ok(g.reshape(pooled, &[b, c])?)
}

/// Records the whole network on `g` for a batch of NHWC images.
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    config: &ModelConfig,
    pruned: bool,
    params: &BTreeMap<String, NodeId>,
    images: NodeId,
) -> Result<OutputNodes, ModelError> {
    let shape = g.value(images).shape().to_vec();
    let s = config.input_hw;
    if shape.len() != 4 || shape[1] != s || shape[2] != s || shape[3] != 3 {
        return Err(ModelError::InputShape {
            expected: s,
            got: shape,
        });
    }
    let b = shape[0];
    let taps = backbone(g, config, params, images)?;
    let features = if config.fusion_enabled {
        fuse_features(g, params, &taps, [0, 1, 2, 3, 4])?
    } else {
        let pooled = g.global_avg_pool(taps[STAGES - 1])?;
        g.reshape(pooled, &[b, config.tail_channels])?
    };
    let hw = lookup(params, "head.weight")?;
    let hb = lookup(params, "head.bias")?;
    let head = g.dense(features, hw, hb)?;
    let corners_raw = g.slice_cols(head, 0, 8)?;
    let corners = g.sigmoid(corners_raw);
    let (borders, logit_start) = if pruned {
        (None, 8)
    } else {
        let end = 8 + config.border_values();
        let raw = g.slice_cols(head, 8, end)?;
        (Some(g.sigmoid(raw)), end)
    };
    let logits = g.slice_cols(head, logit_start, logit_start + config.n_cls)?;
    Ok(OutputNodes {
        corners,
        borders,
        logits,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub corners: Tensor<f32>,
    /// `[B, 0]` for pruned checkpoints.
    pub borders: Tensor<f32>,
    pub logits: Tensor<f32>,
}

pub fn forward(ckpt: &Checkpoint, images: &Tensor<f32>) -> Result<ModelOutput, ModelError> {
    let mut g = Graph::<f32>::new();
    let params = register_params(&mut g, ckpt, false);
    let x = g.constant(images.clone());
    let out = forward_graph(&mut g, &ckpt.config, ckpt.pruned, &params, x)?;
    let b = images.shape()[0];
    let borders = match out.borders {
        Some(id) => g.value(id).clone(),
        None => Tensor::zeros(&[b, 0]),
    };
    Ok(ModelOutput {
        corners: g.value(out.corners).clone(),
        borders,
        logits: g.value(out.logits).clone(),
    })
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

/// Decodes one row of encoded corner outputs to pixel coordinates.
pub fn decode_corners(encoded: &[f32], image_w: f64, image_h: f64) -> Quad {
    let p = |k: usize| {
        Point2::new(
            decode_coord(encoded[2 * k] as f64) * image_w,
            decode_coord(encoded[2 * k + 1] as f64) * image_h,
        )
    };
    Quad {
        corners: [p(0), p(1), p(2), p(3)],
    }
}

/// Runs one image (`[S,S,3]` or `[1,S,S,3]`) and returns the corner quad in
/// pixel units of an `image_w` x `image_h` frame plus the predicted class.
pub fn predict_quad(
    ckpt: &Checkpoint,
    image: &Tensor<f32>,
    image_w: f64,
    image_h: f64,
) -> Result<(Quad, usize), ModelError> {
    let batched = if image.rank() == 3 {
        let mut s = vec![1];
        s.extend_from_slice(image.shape());
        image.clone().reshape(&s)?
    } else {
        image.clone()
    };
    let out = forward(ckpt, &batched)?;
    Ok((
        decode_corners(out.corners.data(), image_w, image_h),
        argmax(out.logits.data()),
    ))
}

/// Keeps only the corner and class columns of the dense head.
pub fn prune_for_inference(ckpt: &Checkpoint) -> Result<Checkpoint, ModelError> {
    if ckpt.pruned {
        return Ok(ckpt.clone());
    }
    let cfg = &ckpt.config;
    let full_k = cfg.head_outputs(false);
    let keep: Vec<usize> = (0..8).chain(full_k - cfg.n_cls..full_k).collect();
    let w = ckpt.tensor("head.weight")?;
    let b = ckpt.tensor("head.bias")?;
    let [d, k] = w.dims2("prune_for_inference")?;
    if k != full_k {
        return Err(ModelError::TensorShape {
            name: "head.weight".into(),
            expected: vec![d, full_k],
            got: w.shape().to_vec(),
        });
    }
    let wd: Vec<f32> = w
        .data()
        .chunks_exact(k)
        .flat_map(|row| keep.iter().map(move |&c| row[c]))
        .collect();
    let bd: Vec<f32> = keep.iter().map(|&c| b.data()[c]).collect();
    let mut out = ckpt.clone();
    out.tensors
        .insert("head.weight".into(), Tensor::new(vec![d, keep.len()], wd)?);
    out.tensors
        .insert("head.bias".into(), Tensor::new(vec![keep.len()], bd)?);
    out.pruned = true;
    Ok(out)
}
