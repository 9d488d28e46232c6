//! Context-frame replacement during training, plus the deterministic
//! corruptions used to probe robustness at evaluation time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Image, RgbImage, SequenceSample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[serde(alias = "unrelated")]
    UnrelatedData,
    RandomTensor,
    Distortion,
    GaussianBlur,
    None,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::UnrelatedData => "unrelated_data",
            NoiseKind::RandomTensor => "random_tensor",
            NoiseKind::Distortion => "distortion",
            NoiseKind::GaussianBlur => "gaussian_blur",
            NoiseKind::None => "none",
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
            Error::Config(format!(
                "unknown noise kind `{s}` (expected unrelated_data, random_tensor, distortion, gaussian_blur or none)"
            ))
        })
    }
}

/// Strength of the synthetic corruptions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    /// Largest displacement, in pixels, of the distortion field.
    pub distortion_max: f64,
    /// Range `[lo, hi]` the blur sigma is drawn from.
    pub blur_sigma: [f64; 2],
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self { distortion_max: 8.0, blur_sigma: [2.0, 4.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoisePolicy {
    #[serde(rename = "noise_kind")]
    pub kind: NoiseKind,
    pub p: f64,
    /// Maximum replaced frames; `None` means `floor(T / 2)`.
    pub cap: Option<usize>,
    pub reversal_p: f64,
    #[serde(flatten)]
    pub params: NoiseParams,
}

impl Default for NoisePolicy {
    fn default() -> Self {
        Self { kind: NoiseKind::UnrelatedData, p: 0.5, cap: None, reversal_p: 0.5, params: NoiseParams::default() }
    }
}

impl NoisePolicy {
    pub fn none() -> Self {
        Self { kind: NoiseKind::None, ..Self::default() }
    }

    pub fn cap_for(&self, seq_len: usize) -> usize {
        self.cap.unwrap_or(seq_len / 2).min(seq_len.saturating_sub(1))
    }

    pub fn validate(&self, seq_len: usize) -> Result<()> {
        for (name, v) in [("p", self.p), ("reversal_p", self.reversal_p)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if let Some(cap) = self.cap {
            if cap + 1 > seq_len {
                return Err(Error::Config(format!("cap {cap} exceeds the {} context frames", seq_len.saturating_sub(1))));
            }
        }
        let [lo, hi] = self.params.blur_sigma;
        if !(lo > 0.0 && hi >= lo) || !(self.params.distortion_max >= 0.0) {
            return Err(Error::Config("invalid blur sigma range or distortion magnitude".into()));
        }
        Ok(())
    }
}

/// What [`apply_noise`] did to one sequence.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReplacementMask {
    /// One flag per context frame, in the input's temporal order.
    pub flags: Vec<bool>,
    pub reversed: bool,
}

impl ReplacementMask {
    pub fn replaced(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// Flags indexed by position in the output sequence.
    pub fn output_flags(&self) -> Vec<bool> {
        let mut f = self.flags.clone();
        if self.reversed {
            f.reverse();
        }
        f
    }
}

/// Per-pixel `[dy, dx]` displacement, bilinearly interpolated from a 4x4
/// grid of vectors each no longer than `max`.
pub fn displacement_field<R: Rng + ?Sized>(height: usize, width: usize, max: f64, rng: &mut R) -> Vec<[f64; 2]> {
    const GRID: usize = 4;
    let control: Vec<[f64; 2]> = (0..GRID * GRID)
        .map(|_| {
            let r = max * rng.gen::<f64>().sqrt();
            let (s, c) = rng.gen_range(0.0..std::f64::consts::TAU).sin_cos();
            [r * s, r * c]
        })
        .collect();
    let coord = |i: usize, n: usize| {
        let g = if n > 1 { i as f64 * (GRID - 1) as f64 / (n - 1) as f64 } else { 0.0 };
        let g0 = (g.floor() as usize).min(GRID - 2);
        (g0, g - g0 as f64)
    };
    let mut field = Vec::with_capacity(height * width);
    for i in 0..height {
        let (gy, fy) = coord(i, height);
        for j in 0..width {
            let (gx, fx) = coord(j, width);
            let at = |y: usize, x: usize| control[y * GRID + x];
            let mut d = [0.0; 2];
            for (k, v) in d.iter_mut().enumerate() {
                let top = at(gy, gx)[k] * (1.0 - fx) + at(gy, gx + 1)[k] * fx;
                let bot = at(gy + 1, gx)[k] * (1.0 - fx) + at(gy + 1, gx + 1)[k] * fx;
                *v = top * (1.0 - fy) + bot * fy;
            }
            field.push(d);
        }
    }
    field
}

fn sample_clamped(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

pub fn warp(img: &Image, field: &[[f64; 2]]) -> Image {
    let (h, w) = (img.height, img.width);
    let mut out = Image::zeros(h, w);
    for c in 0..3 {
        let src = img.plane(c);
        for (p, d) in field.iter().enumerate() {
            let (i, j) = (p / w, p % w);
            out.data[c * h * w + p] = sample_clamped(src, h, w, i as f64 + d[0], j as f64 + d[1]);
        }
    }
    out
}

/// Normalized Gaussian taps of radius `round(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).round() as i64;
    let taps: Vec<f64> = (-radius..=radius).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let (h, w) = (img.height, img.width);
    let mut out = Image::zeros(h, w);
    let mut tmp = vec![0.0f64; h * w];
    for c in 0..3 {
        let src = img.plane(c);
        for i in 0..h {
            for j in 0..w {
                tmp[i * w + j] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * f64::from(src[i * w + (j as i64 + k as i64 - r).clamp(0, w as i64 - 1) as usize]))
                    .sum();
            }
        }
        for i in 0..h {
            for j in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * tmp[(i as i64 + k as i64 - r).clamp(0, h as i64 - 1) as usize * w + j])
                    .sum();
                out.data[c * h * w + i * w + j] = v as f32;
            }
        }
    }
    out
}

/// A replacement for `template` (which only supplies the size, except for
/// the distortion and blur kinds that transform it).
pub fn make_noise_frame<R: Rng + ?Sized>(
    kind: NoiseKind,
    template: &Image,
    rng: &mut R,
    pool: &[RgbImage],
    params: &NoiseParams,
) -> Result<Image> {
    let (h, w) = (template.height, template.width);
    Ok(match kind {
        NoiseKind::UnrelatedData => {
            if pool.is_empty() {
                return Err(Error::Data("noise pool is empty; unrelated_data noise needs at least one image".into()));
            }
            Image::from_rgb(&pool[rng.gen_range(0..pool.len())]).resize(h, w)
        }
        NoiseKind::RandomTensor => Image { height: h, width: w, data: (0..3 * h * w).map(|_| rng.gen::<f32>()).collect() },
        NoiseKind::Distortion => warp(template, &displacement_field(h, w, params.distortion_max, rng)),
        NoiseKind::GaussianBlur => {
            let [lo, hi] = params.blur_sigma;
            gaussian_blur(template, if hi > lo { rng.gen_range(lo..hi) } else { lo })
        }
        NoiseKind::None => template.clone(),
    })
}

/// Replaces context frames with noise under the policy, then possibly
/// reverses the context order. The target frame and label are never touched.
pub fn apply_noise<R: Rng + ?Sized>(
    seq: &SequenceSample,
    policy: &NoisePolicy,
    rng: &mut R,
    pool: &[RgbImage],
) -> Result<(SequenceSample, ReplacementMask)> {
    let context = seq.len().saturating_sub(1);
    if policy.kind == NoiseKind::None {
        return Ok((seq.clone(), ReplacementMask { flags: vec![false; context], reversed: false }));
    }
    policy.validate(seq.len())?;
    if policy.kind == NoiseKind::UnrelatedData && pool.is_empty() {
        return Err(Error::Data("noise pool is empty; unrelated_data noise needs at least one image".into()));
    }
    let cap = policy.cap_for(seq.len());
    let coins: Vec<bool> = (0..context).map(|_| rng.gen_bool(policy.p)).collect();
    let mut flags = vec![false; context];
    let mut used = 0;
    for (flag, coin) in flags.iter_mut().zip(coins) {
        if coin && used < cap {
            *flag = true;
            used += 1;
        }
    }
    let mut out = seq.clone();
    for (t, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
        out.frames[t] = make_noise_frame(policy.kind, &seq.frames[t], rng, pool, &policy.params)?;
    }
    let reversed = rng.gen_bool(policy.reversal_p);
    if reversed {
        out.frames[..context].reverse();
    }
    Ok((out, ReplacementMask { flags, reversed }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    Distortion,
    GaussianBlur,
    Both,
}

impl Corruption {
    pub fn name(self) -> &'static str {
        match self {
            Corruption::Distortion => "distortion",
            Corruption::GaussianBlur => "gaussian_blur",
            Corruption::Both => "both",
        }
    }
}

impl std::str::FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown corruption `{s}` (expected distortion, gaussian_blur or both)")))
    }
}

/// Corrupts the context frames named by 1-based position (frame `T` is the target).
pub fn corrupt_for_eval<R: Rng + ?Sized>(
    seq: &SequenceSample,
    frames: &[usize],
    kind: Corruption,
    params: &NoiseParams,
    rng: &mut R,
) -> Result<SequenceSample> {
    let t_len = seq.len();
    for &f in frames {
        if f == t_len {
            return Err(Error::invalid(format!("frame {f} is the target frame and cannot be corrupted")));
        }
        if f == 0 || f > t_len {
            return Err(Error::invalid(format!("frame {f} outside the context range 1..={}", t_len - 1)));
        }
    }
    let mut out = seq.clone();
    for &f in frames {
        let frame = &mut out.frames[f - 1];
        if matches!(kind, Corruption::Distortion | Corruption::Both) {
            *frame = make_noise_frame(NoiseKind::Distortion, frame, rng, &[], params)?;
        }
        if matches!(kind, Corruption::GaussianBlur | Corruption::Both) {
            *frame = make_noise_frame(NoiseKind::GaussianBlur, frame, rng, &[], params)?;
        }
    }
    Ok(out)
}
