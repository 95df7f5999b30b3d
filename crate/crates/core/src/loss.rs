//! Training objective: point regression, classification and the line terms
//! that keep each border's points collinear and evenly spaced.
//!
//! The per-term functions work on flat `[x, y]` point slices over any
//! [`Scalar`] and can accumulate their gradient into a caller-provided
//! buffer; [`DetectionLoss`] packages the batch objective as a tape op.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{check_point_count, Point2, PointRing};
use crate::numerics::{CustomOp, NumericsError, Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("corner vector has {corners} values and border vector {borders}; no point count fits")]
    InconsistentLengths { corners: usize, borders: usize },
    #[error("prediction has {pred} points but target has {target}")]
    PointCountMismatch { pred: usize, target: usize },
    #[error("class {class} out of range for {n_cls} classes")]
    ClassOutOfRange { class: usize, n_cls: usize },
}

impl From<LossError> for NumericsError {
    fn from(e: LossError) -> Self {
        NumericsError::shape("loss", e.to_string())
    }
}

/// Weights of the classification, similarity and distance terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub delta: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            delta: 0.32,
            beta: 0.0032,
            gamma: 0.0032,
        }
    }
}

impl LossWeights {
    /// Same classification weight with both line terms switched off.
    pub fn without_line_loss(self) -> Self {
        Self {
            beta: 0.0,
            gamma: 0.0,
            ..self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reg: f64,
    pub cls: f64,
    pub sim: f64,
    pub dis: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(reg: f64, cls: f64, sim: f64, dis: f64, w: &LossWeights) -> Self {
        Self {
            reg,
            cls,
            sim,
            dis,
            total: reg + w.delta * cls + w.beta * sim + w.gamma * dis,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.reg, self.cls, self.sim, self.dis, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Point count implied by the two output branches.
pub fn ring_size(corners: usize, borders: usize) -> Result<usize, LossError> {
    let err = LossError::InconsistentLengths { corners, borders };
    if corners != 8 || borders % 8 != 0 {
        return Err(err);
    }
    let n = 4 + borders / 2;
    check_point_count(n).map_err(|_| err)?;
    Ok(n)
}

/// Ring index of border point `j` (0-based, corners excluded) on side `k`.
fn border_slot(n: usize, k: usize, j: usize) -> usize {
    k * (n / 4) + 1 + j
}

/// Interleaves corner and border branch outputs into ring order.
pub fn ring_points<T: Scalar>(corners: &[T], borders: &[T]) -> Result<Vec<[T; 2]>, LossError> {
    let n = ring_size(corners.len(), borders.len())?;
    let per = n / 4 - 1;
    let mut pts = vec![[T::zero(); 2]; n];
    for k in 0..4 {
        pts[k * n / 4] = [corners[2 * k], corners[2 * k + 1]];
        for j in 0..per {
            let b = 2 * (k * per + j);
            pts[border_slot(n, k, j)] = [borders[b], borders[b + 1]];
        }
    }
    Ok(pts)
}

/// Inverse of [`ring_points`], scattering a per-point gradient back onto the
/// branch layouts.
fn scatter_ring<T: Scalar>(pts: &[[T; 2]], corners: &mut [T], borders: &mut [T]) {
    let n = pts.len();
    let per = n / 4 - 1;
    for k in 0..4 {
        let c = pts[k * n / 4];
        corners[2 * k] += c[0];
        corners[2 * k + 1] += c[1];
        for j in 0..per {
            let p = pts[border_slot(n, k, j)];
            let b = 2 * (k * per + j);
            borders[b] += p[0];
            borders[b + 1] += p[1];
        }
    }
}

pub fn assemble_ring(corners: &[f64], borders: &[f64]) -> Result<PointRing, LossError> {
    let pts = ring_points(corners, borders)?;
    let n = pts.len();
    PointRing::from_points(pts.into_iter().map(Point2::from).collect())
        .map_err(|_| LossError::InconsistentLengths {
            corners: 8,
            borders: 2 * (n - 4),
        })
}

/// `(corners, borders)` branch vectors for a ring.
pub fn split_ring(ring: &PointRing) -> (Vec<f64>, Vec<f64>) {
    let n = ring.n_total();
    let pts: Vec<[f64; 2]> = ring.points().iter().map(|p| [p.x, p.y]).collect();
    let mut corners = vec![0.0; 8];
    let mut borders = vec![0.0; 2 * (n - 4)];
    scatter_ring(&pts, &mut corners, &mut borders);
    (corners, borders)
}

/// Calls `f(i0, i1, i2)` with ring indices of every consecutive triple on
/// every border (corners included in each border's view).
fn for_each_triple(n: usize, mut f: impl FnMut(usize, usize, usize)) {
    let seg = n / 4;
    for k in 0..4 {
        for j in 0..seg.saturating_sub(1) {
            let i = k * seg + j;
            f(i % n, (i + 1) % n, (i + 2) % n);
        }
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Collinearity penalty: `sum (1 - cos theta) / (N - 4)` over successive
/// point-pair vectors on each border. `grad` (if any) receives
/// `scale * dL/dp`.
pub fn similarity_term<T: Scalar>(pts: &[[T; 2]], mut grad: Option<&mut [[T; 2]]>, scale: T) -> T {
    let n = pts.len();
    let norm = T::of((n - 4) as f64);
    let mut acc = T::zero();
    for_each_triple(n, |a, b, c| {
        let v1 = [pts[a][0] - pts[b][0], pts[a][1] - pts[b][1]];
        let v2 = [pts[b][0] - pts[c][0], pts[b][1] - pts[c][1]];
        let n1 = (v1[0] * v1[0] + v1[1] * v1[1]).sqrt();
        let n2 = (v2[0] * v2[0] + v2[1] * v2[1]).sqrt();
        if n1 == T::zero() || n2 == T::zero() {
            return;
        }
        let dot = v1[0] * v2[0] + v1[1] * v2[1];
        let cos = dot / (n1 * n2);
        acc += T::one() - cos;
        if let Some(g) = grad.as_deref_mut() {
            let s = -scale / norm;
            for d in 0..2 {
                let dv1 = s * (v2[d] / (n1 * n2) - cos * v1[d] / (n1 * n1));
                let dv2 = s * (v1[d] / (n1 * n2) - cos * v2[d] / (n2 * n2));
                g[a][d] += dv1;
                g[b][d] += dv2 - dv1;
                g[c][d] -= dv2;
            }
        }
    });
    acc / norm
}

/// Equal-spacing penalty: `sum ||dx1|-|dx2|| + ||dy1|-|dy2|| / (N - 4)`.
pub fn distance_term<T: Scalar>(pts: &[[T; 2]], mut grad: Option<&mut [[T; 2]]>, scale: T) -> T {
    let n = pts.len();
    let norm = T::of((n - 4) as f64);
    let mut acc = T::zero();
    for_each_triple(n, |a, b, c| {
        for d in 0..2 {
            let d1 = pts[a][d] - pts[b][d];
            let d2 = pts[b][d] - pts[c][d];
            let gap = d1.abs() - d2.abs();
            acc += gap.abs();
            if let Some(g) = grad.as_deref_mut() {
                let s = scale / norm * sign(gap);
                let g1 = s * sign(d1);
                let g2 = -s * sign(d2);
                g[a][d] += g1;
                g[b][d] += g2 - g1;
                g[c][d] -= g2;
            }
        }
    });
    acc / norm
}

/// `sum_i sum_{x,y} |g - p| / (N - 4)`, or the squared deviation when
/// `squared` is set.
pub fn regression_term<T: Scalar>(
    pred: &[[T; 2]],
    target: &[[T; 2]],
    squared: bool,
    mut grad: Option<&mut [[T; 2]]>,
    scale: T,
) -> Result<T, LossError> {
    if pred.len() != target.len() {
        return Err(LossError::PointCountMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    let norm = T::of((pred.len() - 4) as f64);
    let mut acc = T::zero();
    for (i, (p, t)) in pred.iter().zip(target).enumerate() {
        for d in 0..2 {
            let diff = p[d] - t[d];
            if squared {
                acc += diff * diff;
            } else {
                acc += diff.abs();
            }
            if let Some(g) = grad.as_deref_mut() {
                let local = if squared { T::of(2.0) * diff } else { sign(diff) };
                g[i][d] += scale * local / norm;
            }
        }
    }
    Ok(acc / norm)
}

/// Softmax cross-entropy `-log softmax(logits)[class]`; `grad` receives
/// `scale * (softmax - onehot)`.
pub fn cross_entropy<T: Scalar>(
    logits: &[T],
    class: usize,
    grad: Option<&mut [T]>,
    scale: T,
) -> Result<T, LossError> {
    if class >= logits.len() {
        return Err(LossError::ClassOutOfRange {
            class,
            n_cls: logits.len(),
        });
    }
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = logits.iter().map(|&v| (v - m).exp()).sum();
    let lse = m + z.ln();
    if let Some(g) = grad {
        for (i, (gv, &v)) in g.iter_mut().zip(logits).enumerate() {
            let p = (v - lse).exp();
            let onehot = if i == class { T::one() } else { T::zero() };
            *gv += scale * (p - onehot);
        }
    }
    Ok(lse - logits[class])
}

pub fn similarity_loss(ring: &PointRing) -> f64 {
    similarity_term(&ring_array(ring), None, 1.0)
}

pub fn distance_loss(ring: &PointRing) -> f64 {
    distance_term(&ring_array(ring), None, 1.0)
}

pub fn regression_loss(pred: &PointRing, gt: &PointRing) -> Result<f64, LossError> {
    regression_term(&ring_array(pred), &ring_array(gt), false, None, 1.0)
}

pub fn classification_loss(logits: &[f64], class: usize) -> Result<f64, LossError> {
    cross_entropy(logits, class, None, 1.0)
}

fn ring_array(ring: &PointRing) -> Vec<[f64; 2]> {
    ring.points().iter().map(|p| [p.x, p.y]).collect()
}

/// Supervision for one sample. `ring` holds the encoded, normalized target
/// points and is `None` for frames without a document.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTarget {
    pub ring: Option<Vec<[f64; 2]>>,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Use squared instead of absolute point deviations.
    pub squared_regression: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            squared_regression: false,
        }
    }
}

struct BatchGrads<T> {
    corners: Vec<T>,
    borders: Vec<T>,
    logits: Vec<T>,
}

/// Batch-mean loss of the three branch outputs. Frames without a document
/// contribute only the classification term.
fn batch_loss<T: Scalar>(
    corners: &Tensor<T>,
    borders: &Tensor<T>,
    logits: &Tensor<T>,
    targets: &[LossTarget],
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<BatchGrads<T>>), LossError> {
    let b = targets.len();
    let ncls = logits.len() / b.max(1);
    let nc = corners.len() / b.max(1);
    let nb = borders.len() / b.max(1);
    if corners.len() != nc * b || borders.len() != nb * b || logits.len() != ncls * b {
        return Err(LossError::InconsistentLengths {
            corners: corners.len(),
            borders: borders.len(),
        });
    }
    let w = cfg.weights;
    let inv_b = T::one() / T::of(b as f64);
    let mut grads = want_grad.then(|| BatchGrads {
        corners: vec![T::zero(); corners.len()],
        borders: vec![T::zero(); borders.len()],
        logits: vec![T::zero(); logits.len()],
    });
    let (mut reg, mut cls, mut sim, mut dis) = (0.0, 0.0, 0.0, 0.0);
    for (i, t) in targets.iter().enumerate() {
        let lg = &logits.data()[i * ncls..(i + 1) * ncls];
        let gl = grads.as_mut().map(|g| &mut g.logits[i * ncls..(i + 1) * ncls]);
        cls += cross_entropy(lg, t.class, gl, T::of(w.delta) * inv_b)?.as_f64();

        let Some(target) = &t.ring else { continue };
        let c = &corners.data()[i * nc..(i + 1) * nc];
        let bo = &borders.data()[i * nb..(i + 1) * nb];
        let pts = ring_points(c, bo)?;
        if pts.len() != target.len() {
            return Err(LossError::PointCountMismatch {
                pred: pts.len(),
                target: target.len(),
            });
        }
        let tgt: Vec<[T; 2]> = target.iter().map(|p| [T::of(p[0]), T::of(p[1])]).collect();
        let mut gp = want_grad.then(|| vec![[T::zero(); 2]; pts.len()]);
        reg += regression_term(&pts, &tgt, cfg.squared_regression, gp.as_deref_mut(), inv_b)?
            .as_f64();
        if w.beta != 0.0 || !want_grad {
            sim += similarity_term(&pts, gp.as_deref_mut(), T::of(w.beta) * inv_b).as_f64();
        }
        if w.gamma != 0.0 || !want_grad {
            dis += distance_term(&pts, gp.as_deref_mut(), T::of(w.gamma) * inv_b).as_f64();
        }
        if let (Some(g), Some(gp)) = (grads.as_mut(), gp) {
            scatter_ring(
                &gp,
                &mut g.corners[i * nc..(i + 1) * nc],
                &mut g.borders[i * nb..(i + 1) * nb],
            );
        }
    }
    let bf = b as f64;
    Ok((
        LossBreakdown::combine(reg / bf, cls / bf, sim / bf, dis / bf, &w),
        grads,
    ))
}

/// Batch-mean loss breakdown without gradients.
pub fn total_loss<T: Scalar>(
    corners: &Tensor<T>,
    borders: &Tensor<T>,
    logits: &Tensor<T>,
    targets: &[LossTarget],
    cfg: &LossConfig,
) -> Result<LossBreakdown, LossError> {
    batch_loss(corners, borders, logits, targets, cfg, false).map(|(l, _)| l)
}

/// Tape op over `[corners, borders, logits]` producing the scalar total.
pub struct DetectionLoss {
    pub targets: Vec<LossTarget>,
    pub config: LossConfig,
}

impl<T: Scalar> CustomOp<T> for DetectionLoss {
    fn name(&self) -> &'static str {
        "detection_loss"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, NumericsError> {
        let (l, _) = batch_loss(inputs[0], inputs[1], inputs[2], &self.targets, &self.config, false)?;
        Ok(Tensor::scalar(T::of(l.total)))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>, NumericsError> {
        let (_, g) = batch_loss(inputs[0], inputs[1], inputs[2], &self.targets, &self.config, true)?;
        let g = g.expect("requested gradients");
        let s = grad.data()[0];
        let wrap = |t: &Tensor<T>, v: Vec<T>| {
            Tensor::new(t.shape().to_vec(), v.into_iter().map(|x| x * s).collect())
        };
        Ok(vec![
            wrap(inputs[0], g.corners)?,
            wrap(inputs[1], g.borders)?,
            wrap(inputs[2], g.logits)?,
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{equal_division_points, Quad};
    use crate::numerics::{finite_difference_check, Graph};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quad(rng: &mut impl Rng) -> Quad {
        loop {
            let q = Quad::new(std::array::from_fn(|k| {
                let base = [(0.2, 0.2), (0.2, 0.8), (0.8, 0.8), (0.8, 0.2)][k];
                Point2::new(
                    base.0 + rng.gen_range(-0.15..0.15),
                    base.1 + rng.gen_range(-0.15..0.15),
                )
            }));
            if q.is_convex_ccw() {
                return q;
            }
        }
    }

    fn perturbed(ring: &PointRing, rng: &mut impl Rng, amount: f64) -> PointRing {
        let pts = ring
            .points()
            .iter()
            .map(|p| {
                Point2::new(
                    p.x + rng.gen_range(-amount..amount),
                    p.y + rng.gen_range(-amount..amount),
                )
            })
            .collect();
        PointRing::from_points(pts).unwrap()
    }

    /// Second implementation of the line terms, written directly over the
    /// four border views.
    fn oracle_line_terms(ring: &PointRing) -> (f64, f64) {
        let n = ring.n_total() as f64;
        let (mut sim, mut dis) = (0.0, 0.0);
        for k in 0..4 {
            let b = ring.border(k);
            for w in b.windows(3) {
                let (p0, p1, p2) = (w[0], w[1], w[2]);
                let v1 = (p0.x - p1.x, p0.y - p1.y);
                let v2 = (p1.x - p2.x, p1.y - p2.y);
                let l1 = v1.0.hypot(v1.1);
                let l2 = v2.0.hypot(v2.1);
                if l1 > 0.0 && l2 > 0.0 {
                    sim += 1.0 - (v1.0 * v2.0 + v1.1 * v2.1) / (l1 * l2);
                }
                dis += ((p0.x - p1.x).abs() - (p1.x - p2.x).abs()).abs()
                    + ((p0.y - p1.y).abs() - (p1.y - p2.y).abs()).abs();
            }
        }
        (sim / (n - 4.0), dis / (n - 4.0))
    }

    #[test]
    fn ring_layout_for_eight_points() {
        let corners: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let borders: Vec<f64> = (0..8).map(|v| 100.0 + v as f64).collect();
        let ring = assemble_ring(&corners, &borders).unwrap();
        assert_eq!(ring.n_total(), 8);
        for k in 0..4 {
            assert_eq!(ring.points()[2 * k], Point2::new(2.0 * k as f64, 2.0 * k as f64 + 1.0));
        }
        assert_eq!(ring.points()[1], Point2::new(100.0, 101.0));
        assert_eq!(split_ring(&ring), (corners, borders));
    }

    #[test]
    fn inconsistent_branch_lengths_are_rejected() {
        assert!(assemble_ring(&[0.0; 8], &[0.0; 6]).is_err());
        assert!(assemble_ring(&[0.0; 6], &[0.0; 8]).is_err());
        assert!(assemble_ring(&[0.0; 8], &[]).is_err());
    }

    #[test]
    fn ground_truth_ring_round_trips_through_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [8, 12, 28, 100] {
            let ring = equal_division_points(&random_quad(&mut rng), n).unwrap();
            let (c, b) = split_ring(&ring);
            assert_eq!(b.len(), 2 * (n - 4));
            assert_eq!(assemble_ring(&c, &b).unwrap(), ring);
        }
    }

    #[test]
    fn line_terms_vanish_on_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let ring = equal_division_points(&random_quad(&mut rng), 20).unwrap();
            assert!(similarity_loss(&ring) < 1e-9);
            assert!(distance_loss(&ring) < 1e-9);
        }
    }

    /// N = 8 ring whose border 0 is `c0, mid, c1` and whose other borders
    /// are regular.
    fn eight_ring(c0: [f64; 2], mid: [f64; 2], c1: [f64; 2]) -> PointRing {
        let q = Quad::from([c0, c1, [3.0, 1.0], [2.0, -1.0]]);
        let mut pts = equal_division_points(&q, 8).unwrap().into_points();
        pts[1] = Point2::from(mid);
        PointRing::from_points(pts).unwrap()
    }

    #[test]
    fn right_angle_triple_contributes_one() {
        let ring = eight_ring([0.0, 0.0], [1.0, 0.0], [1.0, 1.0]);
        // (1 - cos 90deg) = 1, divided by N - 4 = 4
        assert_abs_diff_eq!(similarity_loss(&ring), 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(similarity_loss(&ring), oracle_line_terms(&ring).0, epsilon = 1e-12);
    }

    #[test]
    fn uneven_gap_triple_contributes_gap_difference() {
        // x-gaps 1 then 2, y-gaps equal
        let ring = eight_ring([0.0, 0.0], [1.0, 1.0], [3.0, 2.0]);
        assert_abs_diff_eq!(distance_loss(&ring), 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(distance_loss(&ring), oracle_line_terms(&ring).1, epsilon = 1e-12);
    }

    #[test]
    fn zero_length_vectors_contribute_nothing() {
        let mut pts = vec![[0.5, 0.5]; 12];
        let mut g = vec![[0.0; 2]; 12];
        assert_eq!(similarity_term(&pts, Some(&mut g), 1.0), 0.0);
        assert!(g.iter().all(|p| p == &[0.0, 0.0]));
        pts[1] = [0.6, 0.5];
        assert!(similarity_term(&pts, None, 1.0f64).is_finite());
    }

    #[test]
    fn perturbed_rings_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let ring = equal_division_points(&random_quad(&mut rng), 28).unwrap();
            let p = perturbed(&ring, &mut rng, 0.02);
            let (s, d) = oracle_line_terms(&p);
            assert_abs_diff_eq!(similarity_loss(&p), s, epsilon = 1e-9);
            assert_abs_diff_eq!(distance_loss(&p), d, epsilon = 1e-9);
        }
    }

    #[test]
    fn line_terms_translation_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let ring = equal_division_points(&random_quad(&mut rng), 20).unwrap();
            let p = perturbed(&ring, &mut rng, 0.03);
            let moved = p.map(|q| Point2::new(q.x + 3.5, q.y - 1.25));
            assert_abs_diff_eq!(similarity_loss(&moved), similarity_loss(&p), epsilon = 1e-9);
            assert_abs_diff_eq!(distance_loss(&moved), distance_loss(&p), epsilon = 1e-9);
            let scaled = p.map(|q| Point2::new(q.x * 2.5, q.y * 2.5));
            assert_abs_diff_eq!(similarity_loss(&scaled), similarity_loss(&p), epsilon = 1e-9);
            assert_abs_diff_eq!(distance_loss(&scaled), 2.5 * distance_loss(&p), epsilon = 1e-9);
        }
    }

    #[test]
    fn regression_examples() {
        let ring = equal_division_points(&Quad::rect(0.1, 0.1, 0.8, 0.8), 100).unwrap();
        assert_eq!(regression_loss(&ring, &ring).unwrap(), 0.0);
        let mut pts = ring.clone().into_points();
        pts[17].x += 0.1;
        let off = PointRing::from_points(pts).unwrap();
        assert_abs_diff_eq!(regression_loss(&off, &ring).unwrap(), 0.1 / 96.0, epsilon = 1e-9);
        let short = equal_division_points(&Quad::rect(0.1, 0.1, 0.8, 0.8), 12).unwrap();
        assert!(matches!(
            regression_loss(&short, &ring),
            Err(LossError::PointCountMismatch { .. })
        ));
    }

    #[test]
    fn regression_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let a = perturbed(&equal_division_points(&random_quad(&mut rng), 28).unwrap(), &mut rng, 0.1);
            let b = equal_division_points(&random_quad(&mut rng), 28).unwrap();
            let oracle: f64 = a
                .points()
                .iter()
                .zip(b.points())
                .map(|(p, q)| (p.x - q.x).abs() + (p.y - q.y).abs())
                .sum::<f64>()
                / 24.0;
            assert_abs_diff_eq!(regression_loss(&a, &b).unwrap(), oracle, epsilon = 1e-9);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        assert_abs_diff_eq!(classification_loss(&[0.3, 0.3], 1).unwrap(), 2f64.ln(), epsilon = 1e-12);
        let sat = classification_loss(&[20.0, 0.0], 0).unwrap();
        assert_abs_diff_eq!(sat, (-20f64).exp().ln_1p(), epsilon = 1e-15);
        assert!((sat - 2.06e-9).abs() < 1e-11);
        assert_eq!(
            classification_loss(&[0.0, 0.0], 2),
            Err(LossError::ClassOutOfRange { class: 2, n_cls: 2 })
        );
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let l: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let c = rng.gen_range(0..4);
            let z: f64 = l.iter().map(|v| v.exp()).sum();
            let oracle = -(l[c].exp() / z).ln();
            assert_abs_diff_eq!(classification_loss(&l, c).unwrap(), oracle, epsilon = 1e-9);
        }
    }

    #[test]
    fn weighted_total() {
        let b = LossBreakdown::combine(1.0, 1.0, 1.0, 1.0, &LossWeights::default());
        assert_abs_diff_eq!(b.total, 1.3264, epsilon = 1e-12);
        let z = LossBreakdown::combine(0.0, 0.0, 0.0, 0.0, &LossWeights::default());
        assert_eq!(z.total, 0.0);
    }

    fn batch_fixture(rng: &mut ChaCha8Rng, b: usize, n: usize) -> (Vec<Tensor<f64>>, Vec<LossTarget>) {
        let mut corners = Vec::new();
        let mut borders = Vec::new();
        let mut targets = Vec::new();
        for i in 0..b {
            let gt = equal_division_points(&random_quad(rng), n).unwrap();
            let pred = perturbed(&gt, rng, 0.05);
            let (c, bo) = split_ring(&pred);
            corners.extend(c);
            borders.extend(bo);
            targets.push(LossTarget {
                ring: (i != 1).then(|| gt.points().iter().map(|p| [p.x, p.y]).collect()),
                class: if i == 1 { 0 } else { 1 },
            });
        }
        let logits = Tensor::from_fn(&[b, 2], |_| rng.gen_range(-2.0..2.0));
        (
            vec![
                Tensor::new(vec![b, 8], corners).unwrap(),
                Tensor::new(vec![b, 2 * (n - 4)], borders).unwrap(),
                logits,
            ],
            targets,
        )
    }

    #[test]
    fn each_term_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (params, targets) = batch_fixture(&mut rng, 3, 20);
        let configs = [
            LossWeights { delta: 0.0, beta: 0.0, gamma: 0.0 },
            LossWeights { delta: 1.0, beta: 0.0, gamma: 0.0 },
            LossWeights { delta: 0.0, beta: 1.0, gamma: 0.0 },
            LossWeights { delta: 0.0, beta: 0.0, gamma: 1.0 },
            LossWeights::default(),
        ];
        for weights in configs {
            for squared in [false, true] {
                let cfg = LossConfig { weights, squared_regression: squared };
                let r = finite_difference_check(&params, 1e-5, |g, ids| {
                    g.custom(
                        Box::new(DetectionLoss { targets: targets.clone(), config: cfg }),
                        ids,
                    )
                })
                .unwrap();
                assert!(r.max_rel_error < 1e-6, "{weights:?} squared={squared}: {r:?}");
            }
        }
    }

    #[test]
    fn negatives_only_pay_classification() {
        let targets = vec![LossTarget { ring: None, class: 0 }];
        let corners = Tensor::<f64>::full(&[1, 8], 0.3);
        let borders = Tensor::<f64>::full(&[1, 16], 0.9);
        let logits = Tensor::<f64>::zeros(&[1, 2]);
        let l = total_loss(&corners, &borders, &logits, &targets, &LossConfig::default()).unwrap();
        assert_eq!((l.reg, l.sim, l.dis), (0.0, 0.0, 0.0));
        assert_abs_diff_eq!(l.total, 0.32 * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn tape_op_reports_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (params, targets) = batch_fixture(&mut rng, 4, 12);
        let cfg = LossConfig::default();
        let expected = total_loss(&params[0], &params[1], &params[2], &targets, &cfg).unwrap();
        let mut g = Graph::<f64>::new();
        let ids: Vec<_> = params.iter().map(|p| g.param(p.clone())).collect();
        let out = g.custom(Box::new(DetectionLoss { targets, config: cfg }), &ids).unwrap();
        assert_abs_diff_eq!(g.value(out).data()[0], expected.total, epsilon = 1e-12);
        assert_abs_diff_eq!(
            expected.total,
            expected.reg + 0.32 * expected.cls + 0.0032 * (expected.sim + expected.dis),
            epsilon = 1e-12
        );
    }
}
