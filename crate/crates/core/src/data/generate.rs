//! Moving-shapes clips: rigid circles, squares and triangles drifting over
//! a textured background, bouncing off the borders.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::image::{LabelMap, RgbImage};
use crate::error::{Error, Result};
use crate::seed::rng_for;

const TRAIN_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;
const POOL_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    /// Class count including the background class 0.
    pub classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Shape radius / half-side range in pixels.
    pub size_min: f64,
    pub size_max: f64,
    /// Speed range in pixels per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Per-clip probability of a background-textured bar sweeping across.
    pub occlusion_prob: f64,
    /// Per-shape, per-frame probability of a 4x velocity jump.
    pub jump_prob: f64,
    pub clip_len: usize,
    pub train_clips: usize,
    pub val_clips: usize,
    pub noise_pool: usize,
    pub fps: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            classes: 4,
            shapes_min: 2,
            shapes_max: 4,
            size_min: 6.0,
            size_max: 11.0,
            speed_min: 0.5,
            speed_max: 2.5,
            occlusion_prob: 0.2,
            jump_prob: 0.03,
            clip_len: 40,
            train_clips: 200,
            val_clips: 40,
            noise_pool: 32,
            fps: 17.0,
            seed: 17,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(2..255).contains(&self.classes) {
            return bad(format!("classes must be in 2..255, got {}", self.classes));
        }
        if self.height == 0 || self.width == 0 {
            return bad("frame size must be positive".into());
        }
        if self.shapes_min == 0 || self.shapes_max < self.shapes_min {
            return bad(format!("invalid shape count range {}..={}", self.shapes_min, self.shapes_max));
        }
        if !(self.size_min > 0.0 && self.size_max >= self.size_min) {
            return bad(format!("invalid shape size range {}..{}", self.size_min, self.size_max));
        }
        if 2.0 * self.size_max >= self.height.min(self.width) as f64 {
            return bad(format!(
                "shapes of size {} would cover the whole {}x{} frame",
                self.size_max, self.height, self.width
            ));
        }
        if !(self.speed_min >= 0.0 && self.speed_max >= self.speed_min) {
            return bad(format!("invalid speed range {}..{}", self.speed_min, self.speed_max));
        }
        for (name, p) in [("occlusion_prob", self.occlusion_prob), ("jump_prob", self.jump_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.clip_len == 0 {
            return bad("clip_len must be positive".into());
        }
        if !(self.fps > 0.0) {
            return bad("fps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    /// Whether offset `(dx, dy)` from the center lies inside a shape of size `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            // Apex at (0, -r), base from (-r, r) to (r, r).
            ShapeKind::Triangle => dy <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

/// A shape's identity and its center in every frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeTrack {
    pub kind: ShapeKind,
    pub class: u8,
    pub size: f64,
    pub velocity: [f64; 2],
    /// `[x, y]` in pixel units, pixel `(i, j)` covering `[j, j+1) x [i, i+1)`.
    pub centers: Vec<[f64; 2]>,
    /// Frames whose step to the next frame used the jump multiplier.
    pub jumps: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub id: usize,
    pub fps: f64,
    pub frames: Vec<RgbImage>,
    pub labels: Vec<LabelMap>,
    pub shapes: Vec<ShapeTrack>,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub train: Vec<VideoClip>,
    pub val: Vec<VideoClip>,
    pub noise_pool: Vec<RgbImage>,
}

/// Folds `x` into `[lo, hi]` by mirror reflection, returning the folded
/// position and whether the direction ends up flipped.
pub fn reflect(mut x: f64, lo: f64, hi: f64) -> (f64, bool) {
    let mut flipped = false;
    if hi <= lo {
        return (lo, false);
    }
    while x < lo || x > hi {
        x = if x < lo { 2.0 * lo - x } else { 2.0 * hi - x };
        flipped = !flipped;
    }
    (x, flipped)
}

struct Background {
    tint: [f64; 3],
    freq: [f64; 2],
    phase: f64,
    grain: Vec<f64>,
}

impl Background {
    fn sample<R: Rng>(cfg: &GenConfig, rng: &mut R) -> Self {
        let base = rng.gen_range(0.3..0.6);
        let tint = [0; 3].map(|_| base + rng.gen_range(-0.08..0.08));
        let freq = [rng.gen_range(0.1..0.45), rng.gen_range(0.1..0.45)];
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let grain = (0..cfg.height * cfg.width).map(|_| rng.gen_range(-0.06..0.06)).collect();
        Self { tint, freq, phase, grain }
    }

    fn color(&self, i: usize, j: usize, width: usize) -> [f64; 3] {
        let wave = 0.12 * (self.freq[0] * j as f64 + self.freq[1] * i as f64 + self.phase).sin();
        let g = self.grain[i * width + j];
        self.tint.map(|t| t + wave + g)
    }
}

const PALETTE: [[f64; 3]; 3] = [[0.85, 0.3, 0.25], [0.3, 0.8, 0.35], [0.3, 0.4, 0.9]];

struct Occluder {
    width: f64,
    start: f64,
    speed: f64,
}

fn generate_clip(cfg: &GenConfig, stream: u64, id: usize) -> VideoClip {
    let mut rng = rng_for(cfg.seed, &[stream, id as u64]);
    let (h, w) = (cfg.height, cfg.width);
    let background = Background::sample(cfg, &mut rng);
    let count = rng.gen_range(cfg.shapes_min..=cfg.shapes_max);
    let mut shapes = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = ShapeKind::ALL[rng.gen_range(0..3)];
        let k = kind as usize;
        let class = (1 + k % (cfg.classes - 1)) as u8;
        let size = rng.gen_range(cfg.size_min..=cfg.size_max);
        let center = [rng.gen_range(size..=w as f64 - size), rng.gen_range(size..=h as f64 - size)];
        let speed = rng.gen_range(cfg.speed_min..=cfg.speed_max);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let velocity = [speed * angle.cos(), speed * angle.sin()];
        colors.push(PALETTE[k].map(|c| (c + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0)));
        shapes.push(ShapeTrack { kind, class, size, velocity, centers: vec![center], jumps: Vec::new() });
    }
    let occluder = rng.gen_bool(cfg.occlusion_prob).then(|| {
        let width = w as f64 / 8.0;
        let span = w as f64 + 2.0 * width;
        let speed = span / cfg.clip_len as f64 * rng.gen_range(0.8..1.6);
        Occluder { width, start: -width, speed }
    });

    for t in 1..cfg.clip_len {
        for s in &mut shapes {
            let jump = rng.gen_bool(cfg.jump_prob);
            if jump {
                s.jumps.push(t - 1);
            }
            let scale = if jump { 4.0 } else { 1.0 };
            let prev = *s.centers.last().unwrap();
            let mut next = [0.0; 2];
            for axis in 0..2 {
                let extent = if axis == 0 { w } else { h } as f64;
                let (x, flipped) = reflect(prev[axis] + scale * s.velocity[axis], s.size, extent - s.size);
                next[axis] = x;
                if flipped {
                    s.velocity[axis] = -s.velocity[axis];
                }
            }
            s.centers.push(next);
        }
    }

    let mut frames = Vec::with_capacity(cfg.clip_len);
    let mut labels = Vec::with_capacity(cfg.clip_len);
    for t in 0..cfg.clip_len {
        let mut rgb = vec![0u8; h * w * 3];
        let mut label = vec![0u8; h * w];
        let bar = occluder.as_ref().map(|o| {
            let x0 = o.start + o.speed * t as f64;
            (x0, x0 + o.width)
        });
        for i in 0..h {
            for j in 0..w {
                let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
                let mut color = background.color(i, j, w);
                let mut class = 0;
                for (s, c) in shapes.iter().zip(&colors) {
                    let [cx, cy] = s.centers[t];
                    if s.kind.contains(px - cx, py - cy, s.size) {
                        class = s.class;
                        color = c.map(|v| v + 0.5 * background.grain[i * w + j]);
                    }
                }
                if bar.is_some_and(|(a, b)| px >= a && px < b) {
                    class = 0;
                    color = background.color(i, (w - 1 - j) % w, w).map(|v| v * 0.8);
                }
                label[i * w + j] = class;
                for c in 0..3 {
                    rgb[(i * w + j) * 3 + c] = (color[c].clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        frames.push(RgbImage { height: h, width: w, data: rgb });
        labels.push(LabelMap { height: h, width: w, data: label });
    }
    VideoClip { id, fps: cfg.fps, frames, labels, shapes }
}

/// A collage of saturated rectangles over high-frequency noise, visually
/// unlike any clip frame.
pub fn generate_pool_image(cfg: &GenConfig, index: usize) -> RgbImage {
    let mut rng = rng_for(cfg.seed, &[POOL_STREAM, index as u64]);
    let (h, w) = (cfg.height, cfg.width);
    let mut data: Vec<u8> = (0..h * w * 3).map(|_| rng.gen()).collect();
    for _ in 0..rng.gen_range(6..=12) {
        let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (y1, x1) = ((y0 + rng.gen_range(2..=h / 2 + 2)).min(h), (x0 + rng.gen_range(2..=w / 2 + 2)).min(w));
        let color: [u8; 3] = [rng.gen(), rng.gen(), rng.gen()];
        for i in y0..y1 {
            for j in x0..x1 {
                for c in 0..3 {
                    let v = &mut data[(i * w + j) * 3 + c];
                    *v = ((u16::from(color[c]) * 3 + u16::from(*v)) / 4) as u8;
                }
            }
        }
    }
    RgbImage { height: h, width: w, data }
}

pub fn generate_clips(cfg: &GenConfig, val: bool, count: usize) -> Vec<VideoClip> {
    let stream = if val { VAL_STREAM } else { TRAIN_STREAM };
    (0..count).into_par_iter().map(|id| generate_clip(cfg, stream, id)).collect()
}

pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    Ok(Dataset {
        config: cfg.clone(),
        train: generate_clips(cfg, false, cfg.train_clips),
        val: generate_clips(cfg, true, cfg.val_clips),
        noise_pool: (0..cfg.noise_pool).into_par_iter().map(|i| generate_pool_image(cfg, i)).collect(),
    })
}
