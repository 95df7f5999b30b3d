//! Planar geometry for document quadrilaterals.
//!
//! Coordinates follow the image convention: x grows to the right and y grows
//! downwards. Under that convention a document's corners are listed
//! counter-clockwise as seen on screen (top-left, bottom-left, bottom-right,
//! top-right for an upright page), and [`signed_area`] is positive for that
//! ordering.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used to treat boundary contacts as inside during clipping.
pub const CLIP_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point count {0} is not a multiple of 4 that is at least 8")]
    InvalidPointCount(usize),
    #[error("degenerate point configuration: {0}")]
    Degenerate(&'static str),
    #[error("point maps to infinity (w = {0:e})")]
    PointAtInfinity(f64),
    #[error("homography is singular (det = {0:e})")]
    Singular(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn lerp(self, other: Point2, t: f64) -> Point2 {
        Point2::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(p: [f64; 2]) -> Self {
        Point2::new(p[0], p[1])
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

/// z-component of `(b - a) x (c - a)`.
fn cross(a: Point2, b: Point2, c: Point2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// Signed polygon area, positive for counter-clockwise order in image
/// coordinates (y down).
pub fn signed_area(poly: &[Point2]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += b.x * a.y - a.x * b.y;
    }
    0.5 * acc
}

pub fn polygon_area(poly: &[Point2]) -> f64 {
    signed_area(poly).abs()
}

/// Four document corners, counter-clockwise from the content top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[[f64; 2]; 4]", into = "[[f64; 2]; 4]")]
pub struct Quad {
    pub corners: [Point2; 4],
}

impl From<[[f64; 2]; 4]> for Quad {
    fn from(c: [[f64; 2]; 4]) -> Self {
        Quad::new(c.map(Point2::from))
    }
}

impl From<Quad> for [[f64; 2]; 4] {
    fn from(q: Quad) -> Self {
        q.corners.map(<[f64; 2]>::from)
    }
}

impl Quad {
    pub const fn new(corners: [Point2; 4]) -> Self {
        Self { corners }
    }

    /// Axis-aligned rectangle `[x0, x0 + w] x [y0, y0 + h]` in corner order.
    pub fn rect(x0: f64, y0: f64, w: f64, h: f64) -> Self {
        Quad::new([
            Point2::new(x0, y0),
            Point2::new(x0, y0 + h),
            Point2::new(x0 + w, y0 + h),
            Point2::new(x0 + w, y0),
        ])
    }

    pub fn signed_area(&self) -> f64 {
        signed_area(&self.corners)
    }

    pub fn is_finite(&self) -> bool {
        self.corners.iter().all(|p| p.is_finite())
    }

    /// True when every turn has the same (counter-clockwise) sign.
    pub fn is_convex_ccw(&self) -> bool {
        (0..4).all(|i| {
            let a = self.corners[i];
            let b = self.corners[(i + 1) % 4];
            let c = self.corners[(i + 2) % 4];
            // Positive signed area in y-down coordinates means a negative
            // cross product for every consecutive triple.
            cross(a, b, c) < 0.0
        })
    }

    /// Smallest interior angle in degrees.
    pub fn min_interior_angle_deg(&self) -> f64 {
        (0..4)
            .map(|i| {
                let prev = self.corners[(i + 3) % 4];
                let cur = self.corners[i];
                let next = self.corners[(i + 1) % 4];
                let (ux, uy) = (prev.x - cur.x, prev.y - cur.y);
                let (vx, vy) = (next.x - cur.x, next.y - cur.y);
                let c = (ux * vx + uy * vy) / (ux.hypot(uy) * vx.hypot(vy));
                c.clamp(-1.0, 1.0).acos().to_degrees()
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn centroid(&self) -> Point2 {
        let sx: f64 = self.corners.iter().map(|p| p.x).sum();
        let sy: f64 = self.corners.iter().map(|p| p.y).sum();
        Point2::new(sx / 4.0, sy / 4.0)
    }

    /// Relabels corners so that `corners[k]` becomes index 0.
    pub fn rotate_labels(&self, k: usize) -> Quad {
        Quad::new(std::array::from_fn(|i| self.corners[(i + k) % 4]))
    }

    pub fn map(&self, f: impl Fn(Point2) -> Point2) -> Quad {
        Quad::new(self.corners.map(f))
    }
}

/// Ordered ring of `N` points: four corners at indices `0, N/4, N/2, 3N/4`
/// with `N/4 - 1` equally spaced points between consecutive corners.
#[derive(Debug, Clone, PartialEq)]
pub struct PointRing {
    points: Vec<Point2>,
}

impl PointRing {
    pub fn from_points(points: Vec<Point2>) -> Result<Self, GeometryError> {
        check_point_count(points.len())?;
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point2> {
        self.points
    }

    pub fn n_total(&self) -> usize {
        self.points.len()
    }

    pub fn corner(&self, k: usize) -> Point2 {
        self.points[k * self.n_total() / 4]
    }

    pub fn corners(&self) -> Quad {
        Quad::new(std::array::from_fn(|k| self.corner(k)))
    }

    /// Points of border `k` (0..4) including both corner endpoints, so the
    /// view has `N/4 + 1` entries.
    pub fn border(&self, k: usize) -> Vec<Point2> {
        let seg = self.n_total() / 4;
        (0..=seg)
            .map(|j| self.points[(k * seg + j) % self.n_total()])
            .collect()
    }

    pub fn map(&self, f: impl Fn(Point2) -> Point2) -> PointRing {
        PointRing {
            points: self.points.iter().copied().map(f).collect(),
        }
    }
}

pub(crate) fn check_point_count(n: usize) -> Result<(), GeometryError> {
    if n < 8 || n % 4 != 0 {
        return Err(GeometryError::InvalidPointCount(n));
    }
    Ok(())
}

/// Builds the ring of corners plus `(N - 4) / 4` equal-division points per
/// border, placed at parameters `j / (N/4)` along each side.
pub fn equal_division_points(quad: &Quad, n_total: usize) -> Result<PointRing, GeometryError> {
    check_point_count(n_total)?;
    let seg = n_total / 4;
    let mut points = Vec::with_capacity(n_total);
    for k in 0..4 {
        let a = quad.corners[k];
        let b = quad.corners[(k + 1) % 4];
        for j in 0..seg {
            points.push(a.lerp(b, j as f64 / seg as f64));
        }
    }
    Ok(PointRing { points })
}

/// Sum of Euclidean distances between corresponding corners.
pub fn corner_distance(pred: &Quad, target: &Quad) -> f64 {
    pred.corners
        .iter()
        .zip(&target.corners)
        .map(|(p, t)| p.distance(*t))
        .sum()
}

/// Projective map of the plane, stored with `h[2][2] = 1` whenever that entry
/// is nonzero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    pub h: [[f64; 3]; 3],
}

impl Homography {
    pub const IDENTITY: Homography = Homography {
        h: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    /// Wraps a raw matrix, rejecting near-singular ones.
    pub fn from_matrix(h: [[f64; 3]; 3]) -> Result<Self, GeometryError> {
        let mut out = Homography { h };
        let d = out.det();
        if !d.is_finite() || d.abs() <= 1e-12 {
            return Err(GeometryError::Singular(d));
        }
        out.normalize();
        Ok(out)
    }

    fn normalize(&mut self) {
        let s = self.h[2][2];
        if s.abs() > 1e-300 {
            for row in &mut self.h {
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
    }

    pub fn det(&self) -> f64 {
        det3(&self.h)
    }

    pub fn inverse(&self) -> Result<Homography, GeometryError> {
        let m = &self.h;
        let d = det3(m);
        if !d.is_finite() || d.abs() <= 1e-300 {
            return Err(GeometryError::Singular(d));
        }
        let mut inv = [[0.0; 3]; 3];
        for (r, row) in inv.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                // adjugate is the transposed cofactor matrix
                let (r0, r1) = others(c);
                let (c0, c1) = others(r);
                let minor = m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
                let sign = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
                *v = sign * minor / d;
            }
        }
        Homography::from_matrix(inv)
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &Homography) -> Homography {
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.h[r][k] * first.h[k][c]).sum();
            }
        }
        let mut h = Homography { h: out };
        h.normalize();
        h
    }

    /// Homogeneous image of `p` before perspective division.
    pub fn project(&self, p: Point2) -> [f64; 3] {
        let h = &self.h;
        [
            h[0][0] * p.x + h[0][1] * p.y + h[0][2],
            h[1][0] * p.x + h[1][1] * p.y + h[1][2],
            h[2][0] * p.x + h[2][1] * p.y + h[2][2],
        ]
    }
}

fn others(i: usize) -> (usize, usize) {
    match i {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn apply_homography(h: &Homography, p: Point2) -> Result<Point2, GeometryError> {
    let [x, y, w] = h.project(p);
    if !w.is_finite() || w.abs() <= 1e-12 {
        return Err(GeometryError::PointAtInfinity(w));
    }
    let out = Point2::new(x / w, y / w);
    if !out.is_finite() {
        return Err(GeometryError::PointAtInfinity(w));
    }
    Ok(out)
}

/// Similarity moving the centroid to the origin with mean distance sqrt(2).
fn normalizing_transform(pts: &[Point2; 4]) -> Result<[[f64; 3]; 3], GeometryError> {
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / 4.0;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / 4.0;
    let mean = pts.iter().map(|p| (p.x - cx).hypot(p.y - cy)).sum::<f64>() / 4.0;
    if !(mean.is_finite() && mean > 0.0) {
        return Err(GeometryError::Degenerate("coincident points"));
    }
    let s = std::f64::consts::SQRT_2 / mean;
    Ok([[s, 0.0, -s * cx], [0.0, s, -s * cy], [0.0, 0.0, 1.0]])
}

fn check_general_position(pts: &[Point2; 4]) -> Result<(), GeometryError> {
    if !pts.iter().all(|p| p.is_finite()) {
        return Err(GeometryError::Degenerate("non-finite coordinate"));
    }
    let extent = pts
        .iter()
        .flat_map(|a| pts.iter().map(move |b| a.distance(*b)))
        .fold(0.0, f64::max);
    if extent == 0.0 {
        return Err(GeometryError::Degenerate("coincident points"));
    }
    for i in 0..4 {
        for j in i + 1..4 {
            if pts[i].distance(pts[j]) <= 1e-9 * extent {
                return Err(GeometryError::Degenerate("coincident points"));
            }
        }
    }
    for skip in 0..4 {
        let tri: Vec<Point2> = (0..4).filter(|&i| i != skip).map(|i| pts[i]).collect();
        if cross(tri[0], tri[1], tri[2]).abs() <= 1e-10 * extent * extent {
            return Err(GeometryError::Degenerate("collinear triple"));
        }
    }
    Ok(())
}

/// Solves `a x = b` in place by Gaussian elimination with partial pivoting.
fn solve_linear<const N: usize>(
    mut a: [[f64; N]; N],
    mut b: [f64; N],
) -> Result<[f64; N], GeometryError> {
    let scale = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    for col in 0..N {
        let pivot = (col..N)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        if a[pivot][col].abs() <= 1e-12 * scale {
            return Err(GeometryError::Degenerate("singular correspondence system"));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..N {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..N {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = [0.0; N];
    for row in (0..N).rev() {
        let tail: f64 = (row + 1..N).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Ok(x)
}

/// Four-point direct linear transform with coordinate normalization.
pub fn estimate_homography(
    src: &[Point2; 4],
    dst: &[Point2; 4],
) -> Result<Homography, GeometryError> {
    check_general_position(src)?;
    check_general_position(dst)?;
    let ts = normalizing_transform(src)?;
    let td = normalizing_transform(dst)?;
    let ts_h = Homography { h: ts };
    let td_h = Homography { h: td };
    let ns: Vec<Point2> = src.iter().map(|p| apply_affine(&ts, *p)).collect();
    let nd: Vec<Point2> = dst.iter().map(|p| apply_affine(&td, *p)).collect();

    let mut a = [[0.0; 8]; 8];
    let mut b = [0.0; 8];
    for i in 0..4 {
        let (x, y) = (ns[i].x, ns[i].y);
        let (u, v) = (nd[i].x, nd[i].y);
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y];
        b[2 * i] = u;
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y];
        b[2 * i + 1] = v;
    }
    let x = solve_linear(a, b)?;
    let hn = Homography {
        h: [[x[0], x[1], x[2]], [x[3], x[4], x[5]], [x[6], x[7], 1.0]],
    };
    let h = td_h.inverse()?.compose(&hn.compose(&ts_h));
    Homography::from_matrix(h.h)
}

fn apply_affine(m: &[[f64; 3]; 3], p: Point2) -> Point2 {
    Point2::new(
        m[0][0] * p.x + m[0][1] * p.y + m[0][2],
        m[1][0] * p.x + m[1][1] * p.y + m[1][2],
    )
}

/// Clips `subject` to the half-plane on the interior side of the directed
/// edge `a -> b`; `orient` is the sign of the clip polygon's signed area.
fn clip_half_plane(subject: &[Point2], a: Point2, b: Point2, orient: f64) -> Vec<Point2> {
    let n = subject.len();
    let mut out = Vec::with_capacity(n + 2);
    // With y-down CCW order, interior points have a negative cross product.
    let side = |p: Point2| -orient * cross(a, b, p);
    for i in 0..n {
        let s = subject[i];
        let e = subject[(i + 1) % n];
        let ds = side(s);
        let de = side(e);
        let s_in = ds >= -CLIP_EPS;
        let e_in = de >= -CLIP_EPS;
        if s_in != e_in {
            let t = ds / (ds - de);
            if t.is_finite() {
                out.push(s.lerp(e, t));
            }
        }
        if e_in {
            out.push(e);
        }
    }
    out
}

/// Area of the intersection of two convex polygons by successive half-plane
/// clipping of `a` against every edge of `b`.
pub fn convex_intersection_area(a: &[Point2], b: &[Point2]) -> f64 {
    if a.len() < 3 || b.len() < 3 {
        return 0.0;
    }
    let orient = signed_area(b);
    if orient == 0.0 || polygon_area(a) == 0.0 || !orient.is_finite() {
        return 0.0;
    }
    let orient = orient.signum();
    let mut poly = a.to_vec();
    for i in 0..b.len() {
        poly = clip_half_plane(&poly, b[i], b[(i + 1) % b.len()], orient);
        if poly.len() < 3 {
            return 0.0;
        }
    }
    polygon_area(&poly)
}

/// Jaccard index after removing the ground truth's perspective distortion.
///
/// The homography taking `gt` onto `gt_canonical` is applied to both
/// quadrilaterals; the ratio of intersection to union is measured in that
/// rectified frame.
pub fn jaccard_index(pred: &Quad, gt: &Quad, gt_canonical: &Quad) -> Result<f64, GeometryError> {
    let h = estimate_homography(&gt.corners, &gt_canonical.corners)?;
    rectified_jaccard(&h, pred, gt)
}

/// Jaccard index of `pred` and `gt` after both are mapped through `h`.
pub fn rectified_jaccard(h: &Homography, pred: &Quad, gt: &Quad) -> Result<f64, GeometryError> {
    let mut ws = [0.0; 8];
    let mut mapped = [Point2::default(); 8];
    for (i, p) in gt.corners.iter().chain(&pred.corners).enumerate() {
        ws[i] = h.project(*p)[2];
        mapped[i] = apply_homography(h, *p)?;
    }
    // A prediction straddling the vanishing line has no finite image.
    if ws.iter().any(|w| w.signum() != ws[0].signum()) {
        return Err(GeometryError::PointAtInfinity(0.0));
    }
    let g = &mapped[..4];
    let s = &mapped[4..];
    let area_g = polygon_area(g);
    if area_g <= 0.0 {
        return Err(GeometryError::Degenerate("ground truth has zero area"));
    }
    let area_s = polygon_area(s);
    let inter = convex_intersection_area(s, g);
    let union = area_g + area_s - inter;
    if !(union > 0.0) {
        return Ok(0.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_square() -> Quad {
        Quad::rect(0.0, 0.0, 1.0, 1.0)
    }

    fn random_convex_quad(rng: &mut impl Rng) -> Quad {
        loop {
            let cx = rng.gen_range(-5.0..5.0);
            let cy = rng.gen_range(-5.0..5.0);
            let base: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            // CCW on screen (y down) means decreasing math angle.
            let q = Quad::new(std::array::from_fn(|k| {
                let ang = base - k as f64 * std::f64::consts::FRAC_PI_2 + rng.gen_range(-0.5..0.5);
                let r = rng.gen_range(1.0..4.0);
                Point2::new(cx + r * ang.cos(), cy + r * ang.sin())
            }));
            if q.is_convex_ccw() && q.min_interior_angle_deg() > 10.0 {
                return q;
            }
        }
    }

    #[test]
    fn unit_square_orientation_is_positive() {
        assert_eq!(unit_square().signed_area(), 1.0);
        assert!(unit_square().is_convex_ccw());
    }

    #[test]
    fn eight_point_ring_has_midpoints() {
        let ring = equal_division_points(&unit_square(), 8).unwrap();
        assert_eq!(ring.n_total(), 8);
        assert_eq!(ring.points()[1], Point2::new(0.0, 0.5));
        assert_eq!(ring.points()[3], Point2::new(0.5, 1.0));
        assert_eq!(ring.points()[5], Point2::new(1.0, 0.5));
        assert_eq!(ring.points()[7], Point2::new(0.5, 0.0));
        for k in 0..4 {
            assert_eq!(ring.corner(k), unit_square().corners[k]);
        }
    }

    #[test]
    fn hundred_point_ring_parameters() {
        let ring = equal_division_points(&unit_square(), 100).unwrap();
        let left = ring.border(0);
        assert_eq!(left.len(), 26);
        for (j, p) in left.iter().enumerate() {
            assert_abs_diff_eq!(p.y, j as f64 / 25.0, epsilon = 1e-15);
            assert_eq!(p.x, 0.0);
        }
        // 24 interior points on each border
        assert_eq!(left[1..25].len(), 24);
        assert_eq!(*left.last().unwrap(), ring.corner(1));
    }

    #[test]
    fn rejects_bad_counts() {
        for n in [0, 4, 6, 10, 27] {
            assert_eq!(
                equal_division_points(&unit_square(), n),
                Err(GeometryError::InvalidPointCount(n))
            );
        }
    }

    #[test]
    fn border_views_share_corners() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_convex_quad(&mut rng);
        let ring = equal_division_points(&q, 20).unwrap();
        for k in 0..4 {
            let b = ring.border(k);
            assert_eq!(b.len(), 6);
            assert_eq!(b[0], q.corners[k]);
            assert_eq!(b[5], q.corners[(k + 1) % 4]);
        }
    }

    #[test]
    fn relabeling_rotates_ring() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let q = random_convex_quad(&mut rng);
            let n = 24;
            let ring = equal_division_points(&q, n).unwrap();
            for k in 0..4 {
                let rotated = equal_division_points(&q.rotate_labels(k), n).unwrap();
                for i in 0..n {
                    let a = rotated.points()[i];
                    let b = ring.points()[(i + k * n / 4) % n];
                    assert_abs_diff_eq!(a.x, b.x, epsilon = 1e-12);
                    assert_abs_diff_eq!(a.y, b.y, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn corner_distance_examples() {
        let q = unit_square();
        assert_eq!(corner_distance(&q, &q), 0.0);
        let shifted = q.map(|p| Point2::new(p.x + 3.0, p.y + 4.0));
        assert_abs_diff_eq!(corner_distance(&shifted, &q), 20.0, epsilon = 1e-12);
    }

    #[test]
    fn corner_distance_matches_per_corner_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = random_convex_quad(&mut rng);
            let b = random_convex_quad(&mut rng);
            let mut oracle = 0.0;
            for i in 0..4 {
                let dx = a.corners[i].x - b.corners[i].x;
                let dy = a.corners[i].y - b.corners[i].y;
                oracle += (dx * dx + dy * dy).sqrt();
            }
            assert_abs_diff_eq!(corner_distance(&a, &b), oracle, epsilon = 1e-12);
            assert_abs_diff_eq!(corner_distance(&a, &b), corner_distance(&b, &a), epsilon = 1e-12);
        }
    }

    #[test]
    fn homography_identity_and_translation() {
        let sq = unit_square().corners;
        let h = estimate_homography(&sq, &sq).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let want = if r == c { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(h.h[r][c], want, epsilon = 1e-12);
            }
        }
        let moved = sq.map(|p| Point2::new(p.x + 2.0, p.y - 1.0));
        let t = estimate_homography(&sq, &moved).unwrap();
        let want = [[1.0, 0.0, 2.0], [0.0, 1.0, -1.0], [0.0, 0.0, 1.0]];
        for r in 0..3 {
            for c in 0..3 {
                assert_abs_diff_eq!(t.h[r][c], want[r][c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn homography_reprojects_random_quads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let a = random_convex_quad(&mut rng);
            let b = random_convex_quad(&mut rng);
            let h = estimate_homography(&a.corners, &b.corners).unwrap();
            for i in 0..4 {
                let p = apply_homography(&h, a.corners[i]).unwrap();
                assert!(p.distance(b.corners[i]) < 1e-9, "{p:?} vs {:?}", b.corners[i]);
            }
        }
    }

    #[test]
    fn homography_rejects_degenerate_input() {
        let sq = unit_square().corners;
        let collinear = [
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(2.0, 2.0),
            Point2::new(0.0, 1.0),
        ];
        assert!(matches!(
            estimate_homography(&collinear, &sq),
            Err(GeometryError::Degenerate(_))
        ));
        let coincident = [sq[0], sq[0], sq[2], sq[3]];
        assert!(estimate_homography(&sq, &coincident).is_err());
    }

    #[test]
    fn apply_examples() {
        let p = apply_homography(&Homography::IDENTITY, Point2::new(3.0, 5.0)).unwrap();
        assert_eq!(p, Point2::new(3.0, 5.0));
        let scale = Homography::from_matrix([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]])
            .unwrap();
        assert_eq!(
            apply_homography(&scale, Point2::new(1.0, 1.0)).unwrap(),
            Point2::new(2.0, 2.0)
        );
        let horizon =
            Homography::from_matrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]).unwrap();
        assert!(matches!(
            apply_homography(&horizon, Point2::new(-1.0, 0.0)),
            Err(GeometryError::PointAtInfinity(_))
        ));
    }

    #[test]
    fn inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = random_convex_quad(&mut rng);
            let b = random_convex_quad(&mut rng);
            let h = estimate_homography(&a.corners, &b.corners).unwrap();
            let inv = h.inverse().unwrap();
            let p = a.centroid();
            let back = apply_homography(&inv, apply_homography(&h, p).unwrap()).unwrap();
            assert!(back.distance(p) < 1e-9);
        }
    }

    #[test]
    fn intersection_basics() {
        let sq = unit_square().corners;
        assert_abs_diff_eq!(convex_intersection_area(&sq, &sq), 1.0, epsilon = 1e-12);
        let far = Quad::rect(5.0, 5.0, 1.0, 1.0).corners;
        assert_eq!(convex_intersection_area(&sq, &far), 0.0);
        let touching = Quad::rect(1.0, 0.0, 1.0, 1.0).corners;
        assert_abs_diff_eq!(convex_intersection_area(&sq, &touching), 0.0, epsilon = 1e-12);
        let flat = [sq[0], sq[0], sq[1], sq[1]];
        assert_eq!(convex_intersection_area(&flat, &sq), 0.0);
        let inner = Quad::rect(0.25, 0.25, 0.5, 0.5).corners;
        assert_abs_diff_eq!(convex_intersection_area(&inner, &sq), 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(convex_intersection_area(&sq, &inner), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn intersection_bounded_by_smaller_area() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let a = random_convex_quad(&mut rng);
            let b = random_convex_quad(&mut rng);
            let i = convex_intersection_area(&a.corners, &b.corners);
            let j = convex_intersection_area(&b.corners, &a.corners);
            assert!(i <= a.signed_area().min(b.signed_area()) + 1e-9);
            assert_abs_diff_eq!(i, j, epsilon = 1e-9);
        }
    }

    #[test]
    fn jaccard_examples() {
        let gt = Quad::new([
            Point2::new(10.0, 12.0),
            Point2::new(8.0, 50.0),
            Point2::new(47.0, 55.0),
            Point2::new(52.0, 9.0),
        ]);
        let canon = unit_square();
        assert_abs_diff_eq!(jaccard_index(&gt, &gt, &canon).unwrap(), 1.0, epsilon = 1e-9);

        // Prediction that rectifies to the unit square shifted by half a side.
        let h = estimate_homography(&canon.corners, &gt.corners).unwrap();
        let shifted = canon.map(|p| Point2::new(p.x + 0.5, p.y));
        let pred = shifted.map(|p| apply_homography(&h, p).unwrap());
        assert_abs_diff_eq!(
            jaccard_index(&pred, &gt, &canon).unwrap(),
            1.0 / 3.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn jaccard_fails_on_degenerate_ground_truth() {
        let line = Quad::new([
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(2.0, 0.0),
            Point2::new(3.0, 0.0),
        ]);
        assert!(jaccard_index(&unit_square(), &line, &unit_square()).is_err());
    }
}
