//! Procedural scene rendering. Every random draw comes from ChaCha streams
//! keyed by `(seed, index)`, so a scene is a pure function of its config and
//! index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Background, DataError, QuadLabel, RgbImage, SampleMeta, SceneConfig, SceneSample};
use crate::geometry::{estimate_homography, Homography, Point2, Quad};

const MAX_ATTEMPTS: usize = 100;
const MIN_ANGLE_DEG: f64 = 10.0;
const FRAME_MARGIN: f64 = 0.02;
/// Out-of-frame corners stay within this distance of the frame edge, inside
/// the range the coordinate encoding can represent.
const MAX_OVERSHOOT: f64 = 0.14;
const MIN_OVERSHOOT: f64 = 0.04;
const SUPERSAMPLE: [f64; 2] = [0.25, 0.75];

const SCENE_STREAM: u64 = 0x5ce0_e5ce_0000_0001;
const OCCLUDER_STREAM: u64 = 0x0cc1_0de5_0000_0002;

/// How the occluder of a scene is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Occlusion {
    /// Drawn with the config's probability and maximum fraction.
    Random,
    None,
    /// Disc over a randomly chosen corner with this radius fraction; zero
    /// renders no occluder.
    Forced(f64),
}

fn stream(seed: u64, index: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose);
    rng.set_stream(index);
    rng
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash01(seed: u64, x: i64, y: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((x as u64).wrapping_mul(0x9e37_79b9) ^ (y as u64).rotate_left(32)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

type Rgb = [f64; 3];

fn lerp(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

fn random_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Rgb {
    [0; 3].map(|_| rng.gen_range(lo..hi))
}

#[derive(Debug, Clone)]
struct BackgroundPainter {
    kind: Background,
    c0: Rgb,
    c1: Rgb,
    angle: f64,
    period: f64,
    noise_seed: u64,
}

impl BackgroundPainter {
    fn draw(kind: Background, rng: &mut ChaCha8Rng, side: f64) -> Self {
        Self {
            kind,
            c0: random_color(rng, 0.0, 0.55),
            c1: random_color(rng, 0.05, 0.65),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            period: rng.gen_range(0.06..0.2) * side,
            noise_seed: rng.gen(),
        }
    }

    fn color(&self, p: Point2, side: f64) -> Rgb {
        let (s, c) = self.angle.sin_cos();
        let along = p.x * c + p.y * s;
        let across = -p.x * s + p.y * c;
        match self.kind {
            Background::Flat => self.c0,
            Background::Gradient => {
                let t = 0.5 + (along / side - 0.5 * (c + s)) / 1.5;
                lerp(self.c0, self.c1, t.clamp(0.0, 1.0))
            }
            Background::Checker => {
                let parity = (along / self.period).floor() as i64 + (across / self.period).floor() as i64;
                if parity.rem_euclid(2) == 0 {
                    self.c0
                } else {
                    self.c1
                }
            }
            Background::Stripes => {
                if (along / self.period).rem_euclid(1.0) < 0.5 {
                    self.c0
                } else {
                    self.c1
                }
            }
            Background::Noise => {
                let g = self.period * 0.5;
                let (fx, fy) = (p.x / g, p.y / g);
                let (ix, iy) = (fx.floor() as i64, fy.floor() as i64);
                let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
                let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
                let v = |dx: i64, dy: i64| hash01(self.noise_seed, ix + dx, iy + dy);
                let top = v(0, 0) * (1.0 - tx) + v(1, 0) * tx;
                let bot = v(0, 1) * (1.0 - tx) + v(1, 1) * tx;
                let base = lerp(self.c0, self.c1, top * (1.0 - ty) + bot * ty);
                let grain = hash01(!self.noise_seed, p.x.floor() as i64, p.y.floor() as i64) - 0.5;
                base.map(|ch| ch + 0.12 * grain)
            }
        }
    }
}

/// Document content in its own frame: `u` in `[0, 1]` across, `v` in
/// `[0, aspect]` down, content top-left at the origin.
#[derive(Debug, Clone)]
struct DocumentPainter {
    aspect: f64,
    to_doc: Homography,
    paper: Rgb,
    border: Rgb,
    ink: Rgb,
    mark: Rgb,
    lines: Vec<(f64, f64)>,
}

const BORDER_BAND: f64 = 0.045;
const MARK_LO: f64 = 0.09;
const MARK_HI: f64 = 0.29;
const LINE_HALF: f64 = 0.02;

impl DocumentPainter {
    fn color(&self, p: Point2) -> Option<Rgb> {
        let [x, y, w] = self.to_doc.project(p);
        if w.abs() < 1e-12 {
            return None;
        }
        let (u, v) = (x / w, y / w);
        if !(0.0..=1.0).contains(&u) || !(0.0..=self.aspect).contains(&v) {
            return None;
        }
        if u.min(1.0 - u).min(v).min(self.aspect - v) < BORDER_BAND {
            return Some(self.border);
        }
        if (MARK_LO..MARK_HI).contains(&u) && (MARK_LO..MARK_HI).contains(&v) {
            return Some(self.mark);
        }
        for &(row, end) in &self.lines {
            if (v - row).abs() < LINE_HALF && (0.12..end).contains(&u) {
                return Some(self.ink);
            }
        }
        Some(self.paper)
    }

    /// Point of the orientation mark's center in document units.
    #[cfg(test)]
    fn mark_center() -> Point2 {
        Point2::new(0.5 * (MARK_LO + MARK_HI), 0.5 * (MARK_LO + MARK_HI))
    }
}

const CLASS_TINTS: [Rgb; 4] = [
    [1.0, 1.0, 1.0],
    [1.0, 0.95, 0.78],
    [0.82, 0.92, 1.0],
    [0.86, 1.0, 0.86],
];

struct Disc {
    center: Point2,
    radius: f64,
    color: Rgb,
}

struct Placement {
    quad: Quad,
    aspect: f64,
    width: f64,
    out_of_frame: bool,
}

fn place_document(cfg: &SceneConfig, rng: &mut ChaCha8Rng, index: u64) -> Result<Placement, DataError> {
    let side = cfg.image_hw as f64;
    for _ in 0..MAX_ATTEMPTS {
        let s = rng.gen_range(cfg.scale_range[0]..=cfg.scale_range[1]);
        let a = rng.gen_range(cfg.aspect_range[0]..=cfg.aspect_range[1]);
        let (hw, hh) = (0.5 * s, 0.5 * s * a);
        let theta = rng
            .gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
            .to_radians();
        let (sn, cs) = theta.sin_cos();
        let jitter = cfg.perspective_jitter * s;
        let offsets: Vec<Point2> = [(-hw, -hh), (-hw, hh), (hw, hh), (hw, -hh)]
            .iter()
            .map(|&(x, y)| {
                let jx = if jitter > 0.0 { rng.gen_range(-jitter..=jitter) } else { 0.0 };
                let jy = if jitter > 0.0 { rng.gen_range(-jitter..=jitter) } else { 0.0 };
                Point2::new(x * cs - y * sn + jx, x * sn + y * cs + jy)
            })
            .collect();
        let fold = |f: fn(&Point2) -> f64, pick: fn(f64, f64) -> f64, init: f64| {
            offsets.iter().map(f).fold(init, pick)
        };
        let min_x = fold(|p| p.x, f64::min, f64::INFINITY);
        let max_x = fold(|p| p.x, f64::max, f64::NEG_INFINITY);
        let min_y = fold(|p| p.y, f64::min, f64::INFINITY);
        let max_y = fold(|p| p.y, f64::max, f64::NEG_INFINITY);
        let inside = |lo_off: f64, hi_off: f64| {
            let (lo, hi) = (FRAME_MARGIN - lo_off, 1.0 - FRAME_MARGIN - hi_off);
            (lo <= hi).then_some((lo, hi))
        };
        let (Some(rx), Some(ry)) = (inside(min_x, max_x), inside(min_y, max_y)) else {
            continue;
        };
        let mut cx = rng.gen_range(rx.0..=rx.1);
        let mut cy = rng.gen_range(ry.0..=ry.1);
        let out = rng.gen_bool(cfg.out_of_frame_prob);
        if out {
            let over = rng.gen_range(MIN_OVERSHOOT..=MAX_OVERSHOOT);
            match rng.gen_range(0..4) {
                0 => cx = -over - min_x,
                1 => cx = 1.0 + over - max_x,
                2 => cy = -over - min_y,
                _ => cy = 1.0 + over - max_y,
            }
        }
        let norm: Vec<Point2> = offsets.iter().map(|o| Point2::new(o.x + cx, o.y + cy)).collect();
        let lim = -MAX_OVERSHOOT - 1e-9..=1.0 + MAX_OVERSHOOT + 1e-9;
        if norm.iter().any(|p| !lim.contains(&p.x) || !lim.contains(&p.y)) {
            continue;
        }
        let quad = Quad::new([0, 1, 2, 3].map(|k| Point2::new(norm[k].x * side, norm[k].y * side)));
        if !quad.is_convex_ccw() || quad.min_interior_angle_deg() <= MIN_ANGLE_DEG {
            continue;
        }
        let out_of_frame = quad
            .corners
            .iter()
            .any(|p| p.x < 0.0 || p.y < 0.0 || p.x > side || p.y > side);
        return Ok(Placement {
            quad,
            aspect: a,
            width: s * side,
            out_of_frame,
        });
    }
    Err(DataError::Degenerate {
        index,
        attempts: MAX_ATTEMPTS,
    })
}

pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<SceneSample, DataError> {
    generate_scene_with(cfg, index, Occlusion::Random)
}

/// Renders scene `index`. The document, background and class draws do not
/// depend on `occlusion`, so varying it changes only occluder pixels.
pub fn generate_scene_with(
    cfg: &SceneConfig,
    index: u64,
    occlusion: Occlusion,
) -> Result<SceneSample, DataError> {
    cfg.validate()?;
    let side = cfg.image_hw as f64;
    let mut rng = stream(cfg.seed, index, SCENE_STREAM);
    let kind = cfg.backgrounds[rng.gen_range(0..cfg.backgrounds.len())];
    let bg = BackgroundPainter::draw(kind, &mut rng, side);
    let negative = rng.gen_bool(cfg.negative_prob);

    let mut doc = None;
    let mut distractors = Vec::new();
    let mut label = QuadLabel {
        corners: None,
        class: 0,
        canonical: None,
        image_w: cfg.image_hw,
        image_h: cfg.image_hw,
    };
    let mut out_of_frame = false;
    if negative {
        for _ in 0..rng.gen_range(1..=3) {
            distractors.push(Disc {
                center: Point2::new(rng.gen_range(0.0..side), rng.gen_range(0.0..side)),
                radius: rng.gen_range(0.05..0.2) * side,
                color: random_color(&mut rng, 0.0, 0.7),
            });
        }
    } else {
        let placed = place_document(cfg, &mut rng, index)?;
        let class = rng.gen_range(1..cfg.n_cls);
        let unit = Quad::rect(0.0, 0.0, 1.0, placed.aspect);
        let to_doc = estimate_homography(&placed.quad.corners, &unit.corners)?;
        let tint = CLASS_TINTS[(class - 1) % CLASS_TINTS.len()];
        let g = rng.gen_range(0.82..0.98);
        let n_lines = rng.gen_range(3..=6);
        let top = 0.38 * placed.aspect;
        let step = (placed.aspect - BORDER_BAND - 0.08 - top) / n_lines as f64;
        let lines = (0..n_lines)
            .map(|i| (top + step * (i as f64 + 0.5), rng.gen_range(0.45..0.88)))
            .collect();
        let border = rng.gen_range(0.12..0.32);
        let ink = rng.gen_range(0.2..0.45);
        doc = Some(DocumentPainter {
            aspect: placed.aspect,
            to_doc,
            paper: tint.map(|t| t * g),
            border: [border; 3],
            ink: [ink; 3],
            mark: [rng.gen_range(0.7..0.9), 0.1, rng.gen_range(0.05..0.2)],
            lines,
        });
        label.corners = Some(placed.quad);
        label.class = class;
        label.canonical = Some(Quad::rect(0.0, 0.0, placed.width, placed.width * placed.aspect));
        out_of_frame = placed.out_of_frame;
    }

    let mut orng = stream(cfg.seed, index, OCCLUDER_STREAM);
    let corner = orng.gen_range(0..4usize);
    let color = [
        orng.gen_range(0.72..0.95),
        orng.gen_range(0.52..0.72),
        orng.gen_range(0.38..0.6),
    ];
    let fraction = match occlusion {
        Occlusion::None => 0.0,
        Occlusion::Forced(f) => f,
        Occlusion::Random => {
            let hit = orng.gen_bool(cfg.occlusion_prob);
            let f = orng.gen_range(0.0..=cfg.occlusion_max_fraction);
            if hit {
                f
            } else {
                0.0
            }
        }
    };
    let occluder = match label.corners {
        Some(q) if fraction > 0.0 => {
            let mean_side = (0..4)
                .map(|k| q.corners[k].distance(q.corners[(k + 1) % 4]))
                .sum::<f64>()
                / 4.0;
            Some(Disc {
                center: q.corners[corner],
                radius: fraction * mean_side,
                color,
            })
        }
        _ => None,
    };

    let shade = |p: Point2| -> Rgb {
        if let Some(o) = &occluder {
            if p.distance(o.center) <= o.radius {
                return o.color;
            }
        }
        if let Some(c) = doc.as_ref().and_then(|d| d.color(p)) {
            return c;
        }
        for d in &distractors {
            if p.distance(d.center) <= d.radius {
                return d.color;
            }
        }
        bg.color(p, side)
    };
    let mut image = RgbImage::new(cfg.image_hw, cfg.image_hw);
    for y in 0..cfg.image_hw {
        for x in 0..cfg.image_hw {
            let mut acc = [0.0; 3];
            for dy in SUPERSAMPLE {
                for dx in SUPERSAMPLE {
                    let c = shade(Point2::new(x as f64 + dx, y as f64 + dy));
                    for ch in 0..3 {
                        acc[ch] += c[ch];
                    }
                }
            }
            let o = (y * cfg.image_hw + x) * 3;
            for ch in 0..3 {
                let v = acc[ch] / (SUPERSAMPLE.len() * SUPERSAMPLE.len()) as f64;
                image.data[o + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }

    Ok(SceneSample {
        image,
        label,
        meta: SampleMeta {
            seed: cfg.seed,
            index,
            occlusion_fraction: if occluder.is_some() { fraction } else { 0.0 },
            occluded_corner: occluder.as_ref().map(|_| corner),
            out_of_frame,
            background: kind,
        },
    })
}

/// Scenes `0..count`, each rendered once per occlusion fraction
/// (index-major order).
pub fn occlusion_sweep(
    cfg: &SceneConfig,
    count: u64,
    fractions: &[f64],
) -> Result<Vec<SceneSample>, DataError> {
    let mut out = Vec::with_capacity(count as usize * fractions.len());
    for index in 0..count {
        for &f in fractions {
            out.push(generate_scene_with(cfg, index, Occlusion::Forced(f))?);
        }
    }
    Ok(out)
}
