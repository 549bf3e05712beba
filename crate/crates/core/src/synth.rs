//! Procedural scenes and cameras with exact ground truth.
//!
//! A scene is a large textured canvas plus a few moving sprites (the
//! transients). A camera is a 2D similarity transform selecting a rotated,
//! zoomed viewport of the canvas. Because every pose is known, any
//! intermediate view can be rendered exactly for evaluation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub canvas_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Canvas units spanned by the longer image side at zoom 1.
    pub view_extent: f32,
    /// Sub-pixel samples per axis.
    pub supersample: usize,
    pub sprites: usize,
    /// Minimum viewport-centre distance between photos of one set.
    pub min_baseline: f32,
    /// Maximum viewport IoU between photos of one set.
    pub max_overlap: f32,
    /// Photos are drawn within this radius of a shared site centre.
    pub site_radius: f32,
    /// Camera travel, in canvas units, per 16 video frames.
    pub clip_speed: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            canvas_size: 512,
            image_height: 32,
            image_width: 32,
            view_extent: 128.0,
            supersample: 2,
            sprites: 3,
            min_baseline: 36.0,
            max_overlap: 0.6,
            site_radius: 72.0,
            clip_speed: 28.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas_size < 64 || self.image_height == 0 || self.image_width == 0 {
            return Err(Error::Config("canvas or image size too small".into()));
        }
        if !(self.view_extent > 0.0) || self.supersample == 0 {
            return Err(Error::Config("view_extent and supersample must be positive".into()));
        }
        if 2.0 * self.max_half_diagonal(ZOOM_RANGE.0) >= self.canvas_size as f32 {
            return Err(Error::Config("viewport does not fit in the canvas".into()));
        }
        Ok(())
    }

    fn half_extents(&self, zoom: f32) -> (f32, f32) {
        let long = self.image_height.max(self.image_width) as f32;
        let e = self.view_extent / (2.0 * zoom);
        (
            e * self.image_width as f32 / long,
            e * self.image_height as f32 / long,
        )
    }

    fn max_half_diagonal(&self, zoom: f32) -> f32 {
        let (ex, ey) = self.half_extents(zoom);
        (ex * ex + ey * ey).sqrt()
    }

    /// Centres inside this margin keep any viewport within the canvas.
    fn safe_margin(&self) -> f32 {
        self.max_half_diagonal(ZOOM_RANGE.0) + 2.0
    }
}

const ZOOM_RANGE: (f32, f32) = (0.85, 1.2);
const PHOTO_ROTATION: f32 = 0.5;
const MAX_ATTEMPTS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SpriteShape {
    Disc { radius: f32 },
    Rect { half_w: f32, half_h: f32 },
}

/// A transient object moving linearly between two canvas points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub shape: SpriteShape,
    pub color: [f32; 3],
    pub start: [f32; 2],
    pub end: [f32; 2],
}

impl Sprite {
    pub fn position(&self, phase: f32) -> [f32; 2] {
        let p = phase.clamp(0.0, 1.0);
        [
            self.start[0] + p * (self.end[0] - self.start[0]),
            self.start[1] + p * (self.end[1] - self.start[1]),
        ]
    }

    fn contains(&self, phase: f32, x: f32, y: f32) -> bool {
        let [cx, cy] = self.position(phase);
        match self.shape {
            SpriteShape::Disc { radius } => (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius,
            SpriteShape::Rect { half_w, half_h } => (x - cx).abs() <= half_w && (y - cy).abs() <= half_h,
        }
    }

    #[cfg(test)]
    fn reach(&self) -> f32 {
        match self.shape {
            SpriteShape::Disc { radius } => radius,
            SpriteShape::Rect { half_w, half_h } => half_w.max(half_h),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub canvas: Image,
    pub sprites: Vec<Sprite>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub center: [f32; 2],
    pub rotation: f32,
    pub zoom: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Illumination {
    pub gain: [f32; 3],
    pub bias: [f32; 3],
}

impl Illumination {
    pub const NEUTRAL: Illumination = Illumination {
        gain: [1.0; 3],
        bias: [0.0; 3],
    };

    pub fn random(rng: &mut impl Rng) -> Self {
        // a shared exposure plus a per-channel tint
        let exposure = rng.gen_range(0.6..1.4f32);
        let mut gain = [0.0; 3];
        let mut bias = [0.0; 3];
        for c in 0..3 {
            gain[c] = exposure * rng.gen_range(0.8..1.2f32);
            bias[c] = rng.gen_range(-0.08..0.08f32);
        }
        Self { gain, bias }
    }

    /// Uniform brightness change of the neutral illumination.
    pub fn brightness(level: f32) -> Self {
        Self {
            gain: [level; 3],
            bias: [0.0; 3],
        }
    }

    fn apply(&self, rgb: [f32; 3]) -> [f32; 3] {
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = (self.gain[c] * rgb[c] + self.bias[c]).clamp(0.0, 1.0);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Scene generation
// ---------------------------------------------------------------------------

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

struct ValueNoise {
    cells: usize,
    lattice: Vec<f32>,
}

impl ValueNoise {
    fn new(cells: usize, rng: &mut impl Rng) -> Self {
        let lattice = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen::<f32>()).collect();
        Self { cells, lattice }
    }

    fn sample(&self, u: f32, v: f32) -> f32 {
        let (x, y) = (u * self.cells as f32, v * self.cells as f32);
        let (x0, y0) = ((x as usize).min(self.cells - 1), (y as usize).min(self.cells - 1));
        let (fx, fy) = (smoothstep(x - x0 as f32), smoothstep(y - y0 as f32));
        let at = |i: usize, j: usize| self.lattice[j * (self.cells + 1) + i];
        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
        let bot = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// Deterministic scene from `seed`.
pub fn generate_scene(seed: u64, cfg: &SynthConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5CE7_E000);
    let k = cfg.canvas_size;

    let palette: Vec<[f32; 3]> = (0..3)
        .map(|_| [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()])
        .collect();
    // multi-octave noise: coarse cells drive the palette blend, finer cells add detail
    let octaves: Vec<(ValueNoise, f32)> = [4usize, 8, 16, 32]
        .iter()
        .zip([1.0f32, 0.5, 0.25, 0.125])
        .map(|(&cells, amp)| (ValueNoise::new(cells, &mut rng), amp))
        .collect();
    let tint: Vec<ValueNoise> = (0..3).map(|_| ValueNoise::new(16, &mut rng)).collect();

    let mut canvas = Image::new(k, k);
    for y in 0..k {
        for x in 0..k {
            let (u, v) = (x as f32 / k as f32, y as f32 / k as f32);
            let mut n = 0.0;
            let mut total = 0.0;
            for (noise, amp) in &octaves {
                n += amp * noise.sample(u, v);
                total += amp;
            }
            let n = n / total;
            let (a, b) = if n < 0.5 {
                (palette[0], palette[1])
            } else {
                (palette[1], palette[2])
            };
            let w = smoothstep(((n - if n < 0.5 { 0.0 } else { 0.5 }) * 2.0).clamp(0.0, 1.0));
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                let detail = 0.3 * (tint[c].sample(u, v) - 0.5);
                rgb[c] = (a[c] * (1.0 - w) + b[c] * w + detail).clamp(0.0, 1.0);
            }
            canvas.set(y, x, rgb);
        }
    }

    // static geometric primitives
    let primitives = rng.gen_range(10..18);
    for _ in 0..primitives {
        let color = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
        let (cx, cy) = (rng.gen_range(0.0..k as f32), rng.gen_range(0.0..k as f32));
        let disc = rng.gen_bool(0.5);
        let (rx, ry) = (rng.gen_range(10.0..40.0f32), rng.gen_range(10.0..40.0f32));
        let alpha = rng.gen_range(0.6..0.95f32);
        let (x0, x1) = ((cx - rx).max(0.0) as usize, ((cx + rx) as usize + 1).min(k));
        let (y0, y1) = ((cy - ry).max(0.0) as usize, ((cy + ry) as usize + 1).min(k));
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = ((x as f32 - cx) / rx, (y as f32 - cy) / ry);
                let inside = if disc { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if inside {
                    let old = canvas.get(y, x);
                    let mut rgb = [0.0; 3];
                    for c in 0..3 {
                        rgb[c] = old[c] * (1.0 - alpha) + color[c] * alpha;
                    }
                    canvas.set(y, x, rgb);
                }
            }
        }
    }

    let margin = 24.0;
    let sprites = (0..cfg.sprites)
        .map(|_| {
            let shape = if rng.gen_bool(0.5) {
                SpriteShape::Disc {
                    radius: rng.gen_range(6.0..14.0),
                }
            } else {
                SpriteShape::Rect {
                    half_w: rng.gen_range(5.0..12.0),
                    half_h: rng.gen_range(8.0..18.0),
                }
            };
            let hue = rng.gen_range(0..3);
            let mut color = [0.1, 0.1, 0.1];
            color[hue] = 0.95;
            let mut point = || {
                [
                    rng.gen_range(margin..k as f32 - margin),
                    rng.gen_range(margin..k as f32 - margin),
                ]
            };
            Sprite {
                shape,
                color,
                start: point(),
                end: point(),
            }
        })
        .collect();

    Ok(SceneSpec {
        seed,
        canvas,
        sprites,
    })
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Corners of the viewport in canvas coordinates (clockwise from top-left).
pub fn viewport_corners(pose: &CameraPose, cfg: &SynthConfig) -> [[f32; 2]; 4] {
    let (ex, ey) = cfg.half_extents(pose.zoom);
    let (s, c) = pose.rotation.sin_cos();
    let map = |u: f32, v: f32| [pose.center[0] + c * u - s * v, pose.center[1] + s * u + c * v];
    [map(-ex, -ey), map(ex, -ey), map(ex, ey), map(-ex, ey)]
}

pub fn pose_is_valid(pose: &CameraPose, cfg: &SynthConfig) -> bool {
    let hi = (cfg.canvas_size - 1) as f32;
    pose.zoom > 0.0
        && viewport_corners(pose, cfg)
            .iter()
            .all(|p| p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= hi && p[1] <= hi)
}

fn bilinear(canvas: &Image, x: f32, y: f32) -> [f32; 3] {
    let hi = (canvas.width - 1) as f32;
    let (x, y) = (x.clamp(0.0, hi), y.clamp(0.0, hi));
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(canvas.width - 1), (y0 + 1).min(canvas.height - 1));
    let (fx, fy) = (x - x0 as f32, y - y0 as f32);
    let (a, b, c, d) = (canvas.get(y0, x0), canvas.get(y0, x1), canvas.get(y1, x0), canvas.get(y1, x1));
    let mut out = [0.0; 3];
    for k in 0..3 {
        let top = a[k] * (1.0 - fx) + b[k] * fx;
        let bot = c[k] * (1.0 - fx) + d[k] * fx;
        out[k] = top * (1.0 - fy) + bot * fy;
    }
    out
}

/// Renders the viewport of `pose`. With `transients = Some(phase)` the
/// sprites are composited at that phase of their trajectories and the mask
/// marks every pixel any sprite touches.
pub fn render_view(
    scene: &SceneSpec,
    pose: &CameraPose,
    illumination: &Illumination,
    transients: Option<f32>,
    cfg: &SynthConfig,
) -> Result<(Image, Mask)> {
    if !pose_is_valid(pose, cfg) {
        return Err(Error::invalid(format!("pose {pose:?} leaves the canvas")));
    }
    let (h, w) = (cfg.image_height, cfg.image_width);
    let (ex, ey) = cfg.half_extents(pose.zoom);
    let (s, c) = pose.rotation.sin_cos();
    let ss = cfg.supersample;
    let inv = 1.0 / (ss * ss) as f32;
    let mut img = Image::new(h, w);
    let mut mask = Mask::empty(h, w);
    for i in 0..h {
        for j in 0..w {
            let mut acc = [0.0f32; 3];
            let mut touched = false;
            for si in 0..ss {
                for sj in 0..ss {
                    let fu = (j as f32 + (sj as f32 + 0.5) / ss as f32) / w as f32;
                    let fv = (i as f32 + (si as f32 + 0.5) / ss as f32) / h as f32;
                    let (u, v) = ((fu - 0.5) * 2.0 * ex, (fv - 0.5) * 2.0 * ey);
                    let (x, y) = (pose.center[0] + c * u - s * v, pose.center[1] + s * u + c * v);
                    let mut rgb = bilinear(&scene.canvas, x, y);
                    if let Some(phase) = transients {
                        if let Some(sp) = scene.sprites.iter().find(|sp| sp.contains(phase, x, y)) {
                            rgb = sp.color;
                            touched = true;
                        }
                    }
                    let lit = illumination.apply(rgb);
                    for k in 0..3 {
                        acc[k] += lit[k];
                    }
                }
            }
            img.set(i, j, [acc[0] * inv, acc[1] * inv, acc[2] * inv]);
            mask.data[i * w + j] = touched;
        }
    }
    Ok((img, mask))
}

// ---------------------------------------------------------------------------
// View sampling
// ---------------------------------------------------------------------------

fn polygon_area(p: &[[f32; 2]]) -> f32 {
    let mut a = 0.0;
    for i in 0..p.len() {
        let (q, r) = (p[i], p[(i + 1) % p.len()]);
        a += q[0] * r[1] - r[0] * q[1];
    }
    0.5 * a.abs()
}

fn signed_area(p: &[[f32; 2]]) -> f32 {
    let mut a = 0.0;
    for i in 0..p.len() {
        let (q, r) = (p[i], p[(i + 1) % p.len()]);
        a += q[0] * r[1] - r[0] * q[1];
    }
    0.5 * a
}

/// Sutherland–Hodgman clip of convex `subject` by convex `clip`.
fn convex_intersection(subject: &[[f32; 2]], clip: &[[f32; 2]]) -> Vec<[f32; 2]> {
    let orient = signed_area(clip).signum();
    let inside = |a: [f32; 2], b: [f32; 2], p: [f32; 2]| {
        orient * ((b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])) >= 0.0
    };
    let cross_point = |a: [f32; 2], b: [f32; 2], p: [f32; 2], q: [f32; 2]| {
        let (r, s) = ([b[0] - a[0], b[1] - a[1]], [q[0] - p[0], q[1] - p[1]]);
        let denom = r[0] * s[1] - r[1] * s[0];
        let t = ((p[0] - a[0]) * s[1] - (p[1] - a[1]) * s[0]) / denom;
        [a[0] + t * r[0], a[1] + t * r[1]]
    };
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            match (inside(a, b, p), inside(a, b, q)) {
                (true, true) => out.push(q),
                (true, false) => out.push(cross_point(p, q, a, b)),
                (false, true) => {
                    out.push(cross_point(p, q, a, b));
                    out.push(q);
                }
                (false, false) => {}
            }
        }
        if out.is_empty() {
            break;
        }
    }
    out
}

/// Intersection-over-union of two viewports.
pub fn viewport_iou(a: &CameraPose, b: &CameraPose, cfg: &SynthConfig) -> f32 {
    let (pa, pb) = (viewport_corners(a, cfg), viewport_corners(b, cfg));
    let inter = convex_intersection(&pa, &pb);
    let i = if inter.len() >= 3 { polygon_area(&inter) } else { 0.0 };
    let u = polygon_area(&pa) + polygon_area(&pb) - i;
    if u > 0.0 {
        i / u
    } else {
        0.0
    }
}

fn center_distance(a: &CameraPose, b: &CameraPose) -> f32 {
    ((a.center[0] - b.center[0]).powi(2) + (a.center[1] - b.center[1]).powi(2)).sqrt()
}

/// One photo of a set: pose, illumination, and the sprite phase it was taken at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotoShot {
    pub pose: CameraPose,
    pub illumination: Illumination,
    pub phase: f32,
}

#[derive(Debug, Clone)]
pub struct PhotoView {
    pub image: Image,
    pub mask: Mask,
    pub shot: PhotoShot,
}

/// Wide-baseline photo set: poses scattered around a common site, each with
/// its own illumination and transients.
pub fn sample_photo_views(
    scene: &SceneSpec,
    count: usize,
    rng: &mut impl Rng,
    cfg: &SynthConfig,
) -> Result<Vec<PhotoView>> {
    if count == 0 {
        return Err(Error::invalid("photo count must be at least 1"));
    }
    let margin = cfg.safe_margin();
    let lo = margin + cfg.site_radius;
    let hi = cfg.canvas_size as f32 - 1.0 - margin - cfg.site_radius;
    if lo >= hi {
        return Err(Error::Config("site radius too large for the canvas".into()));
    }
    for _ in 0..MAX_ATTEMPTS {
        let site = [rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
        let mut shots: Vec<PhotoShot> = Vec::with_capacity(count);
        let mut tries = 0;
        while shots.len() < count && tries < MAX_ATTEMPTS {
            tries += 1;
            let ang = rng.gen_range(0.0..std::f32::consts::TAU);
            let rad = cfg.site_radius * rng.gen::<f32>().sqrt();
            let pose = CameraPose {
                center: [site[0] + rad * ang.cos(), site[1] + rad * ang.sin()],
                rotation: rng.gen_range(-PHOTO_ROTATION..PHOTO_ROTATION),
                zoom: rng.gen_range(ZOOM_RANGE.0..ZOOM_RANGE.1),
            };
            let ok = pose_is_valid(&pose, cfg)
                && shots.iter().all(|s| {
                    center_distance(&s.pose, &pose) >= cfg.min_baseline
                        && viewport_iou(&s.pose, &pose, cfg) <= cfg.max_overlap
                });
            if ok {
                shots.push(PhotoShot {
                    pose,
                    illumination: Illumination::random(rng),
                    phase: rng.gen(),
                });
            }
        }
        if shots.len() == count {
            return shots
                .into_iter()
                .map(|shot| {
                    let (image, mask) =
                        render_view(scene, &shot.pose, &shot.illumination, Some(shot.phase), cfg)?;
                    Ok(PhotoView { image, mask, shot })
                })
                .collect();
        }
    }
    Err(Error::SamplingFailed {
        what: format!("{count} wide-baseline photos"),
        attempts: MAX_ATTEMPTS,
    })
}

/// A camera path through the scene, one pose per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPath {
    pub poses: Vec<CameraPose>,
}

fn catmull_rom(p0: f32, p1: f32, p2: f32, p3: f32, t: f32) -> f32 {
    let t2 = t * t;
    let t3 = t2 * t;
    0.5 * (2.0 * p1 + (p2 - p0) * t + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2 + (3.0 * p1 - p0 - 3.0 * p2 + p3) * t3)
}

/// Smooth random path of `length` frames; `speed_multiplier` scales travel.
pub fn sample_camera_path(
    length: usize,
    speed_multiplier: f32,
    rng: &mut impl Rng,
    cfg: &SynthConfig,
) -> Result<CameraPath> {
    if length < 2 {
        return Err(Error::invalid("a clip needs at least 2 frames"));
    }
    const KNOT_FRAMES: usize = 16;
    let margin = cfg.safe_margin() + 0.15 * cfg.clip_speed * speed_multiplier;
    let (lo, hi) = (margin, cfg.canvas_size as f32 - 1.0 - margin);
    if lo >= hi {
        return Err(Error::Config("clip speed too large for the canvas".into()));
    }
    let reflect = |v: f32| {
        let span = hi - lo;
        let mut t = (v - lo).rem_euclid(2.0 * span);
        if t > span {
            t = 2.0 * span - t;
        }
        lo + t
    };
    let knots = length.div_ceil(KNOT_FRAMES) + 3;
    let mut heading = rng.gen_range(0.0..std::f32::consts::TAU);
    let mut pos = [rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
    let mut rot = rng.gen_range(-0.3..0.3f32);
    let mut zoom = rng.gen_range(ZOOM_RANGE.0..ZOOM_RANGE.1);
    let mut ks = Vec::with_capacity(knots);
    for _ in 0..knots {
        ks.push((pos, rot, zoom));
        heading += rng.gen_range(-0.6..0.6f32);
        let step = cfg.clip_speed * speed_multiplier * rng.gen_range(0.8..1.2f32);
        pos = [reflect(pos[0] + step * heading.cos()), reflect(pos[1] + step * heading.sin())];
        rot = (rot + rng.gen_range(-0.08..0.08f32) * speed_multiplier.sqrt()).clamp(-0.5, 0.5);
        zoom = (zoom + rng.gen_range(-0.04..0.04f32)).clamp(ZOOM_RANGE.0, ZOOM_RANGE.1);
    }
    let poses = (0..length)
        .map(|f| {
            // knot 1 is the first frame; knots 0 and k+2 only shape tangents
            let seg = f / KNOT_FRAMES + 1;
            let t = (f % KNOT_FRAMES) as f32 / KNOT_FRAMES as f32;
            let k = |d: isize| ks[(seg as isize + d) as usize];
            let (a, b, c, d) = (k(-1), k(0), k(1), k(2));
            let pose = CameraPose {
                center: [
                    catmull_rom(a.0[0], b.0[0], c.0[0], d.0[0], t),
                    catmull_rom(a.0[1], b.0[1], c.0[1], d.0[1], t),
                ],
                rotation: catmull_rom(a.1, b.1, c.1, d.1, t),
                zoom: catmull_rom(a.2, b.2, c.2, d.2, t).clamp(ZOOM_RANGE.0, ZOOM_RANGE.1),
            };
            clamp_pose(pose, cfg)
        })
        .collect();
    Ok(CameraPath { poses })
}

fn clamp_pose(mut pose: CameraPose, cfg: &SynthConfig) -> CameraPose {
    let m = cfg.safe_margin();
    let hi = cfg.canvas_size as f32 - 1.0 - m;
    pose.center = [pose.center[0].clamp(m, hi), pose.center[1].clamp(m, hi)];
    pose
}

#[derive(Debug, Clone)]
pub struct VideoClip {
    pub frames: Vec<Image>,
    pub masks: Vec<Mask>,
    pub path: CameraPath,
    pub illumination: Illumination,
}

/// Video surrogate: smooth camera path, one illumination, no transients
/// unless `with_transients`.
pub fn sample_video_clip(
    scene: &SceneSpec,
    length: usize,
    speed_multiplier: f32,
    with_transients: bool,
    rng: &mut impl Rng,
    cfg: &SynthConfig,
) -> Result<VideoClip> {
    let path = sample_camera_path(length, speed_multiplier, rng, cfg)?;
    let illumination = Illumination::random(rng);
    let phase0: f32 = rng.gen();
    let mut frames = Vec::with_capacity(length);
    let mut masks = Vec::with_capacity(length);
    for (f, pose) in path.poses.iter().enumerate() {
        let phase = with_transients.then(|| (phase0 + 0.002 * f as f32).fract());
        let (img, mask) = render_view(scene, pose, &illumination, phase, cfg)?;
        frames.push(img);
        masks.push(mask);
    }
    Ok(VideoClip {
        frames,
        masks,
        path,
        illumination,
    })
}
