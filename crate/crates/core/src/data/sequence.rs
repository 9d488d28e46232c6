//! Sequence sampling and sequence-consistent augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::generate::VideoClip;
use super::image::{Image, LabelMap};
use crate::error::{Error, Result};
use crate::ops::IGNORE_INDEX;

/// `T` frames ending at the labeled target frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub frames: Vec<Image>,
    pub target_label: LabelMap,
    pub clip_id: usize,
    pub target_index: usize,
    pub interval: usize,
    /// The single transform applied to every frame and the label, if any.
    pub augmentation: Option<Augmentation>,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn target(&self) -> &Image {
        self.frames.last().expect("sequence has at least one frame")
    }
}

/// Clip indices of the frames feeding `target`, oldest first.
pub fn frame_indices(target: usize, interval: usize, seq_len: usize) -> Result<Vec<usize>> {
    if interval == 0 || seq_len == 0 {
        return Err(Error::invalid("interval and sequence length must be positive"));
    }
    let span = (seq_len - 1) * interval;
    if target < span {
        return Err(Error::invalid(format!(
            "target {target} has insufficient history for T = {seq_len} at interval {interval}"
        )));
    }
    Ok((0..seq_len).map(|t| target - span + t * interval).collect())
}

/// Targets of `clip_len` frames that have full history.
pub fn valid_targets(clip_len: usize, interval: usize, seq_len: usize) -> std::ops::Range<usize> {
    let span = seq_len.saturating_sub(1) * interval;
    span.min(clip_len)..clip_len
}

pub fn sample_sequence(clip: &VideoClip, target: usize, interval: usize, seq_len: usize) -> Result<SequenceSample> {
    if target >= clip.len() {
        return Err(Error::invalid(format!("target {target} outside clip {} of {} frames", clip.id, clip.len())));
    }
    let indices = frame_indices(target, interval, seq_len)?;
    Ok(SequenceSample {
        frames: indices.iter().map(|&i| Image::from_rgb(&clip.frames[i])).collect(),
        target_label: clip.labels[target].clone(),
        clip_id: clip.id,
        target_index: target,
        interval,
        augmentation: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    pub flip_p: f64,
    /// Output `[H, W]`; `None` keeps the frame size.
    pub crop: Option<[usize; 2]>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { max_rotation_deg: 10.0, flip_p: 0.5, crop: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub angle_deg: f64,
    pub flip: bool,
    /// `[row, col]` of the crop's top-left corner.
    pub crop_origin: [usize; 2],
    pub crop_size: [usize; 2],
}

impl Augmentation {
    pub fn identity(height: usize, width: usize) -> Self {
        Self { angle_deg: 0.0, flip: false, crop_origin: [0, 0], crop_size: [height, width] }
    }

    pub fn draw<R: Rng + ?Sized>(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut R) -> Result<Self> {
        let [ch, cw] = cfg.crop.unwrap_or([height, width]);
        if ch == 0 || cw == 0 || ch > height || cw > width {
            return Err(Error::invalid(format!("crop {ch}x{cw} does not fit {height}x{width} frames")));
        }
        let angle_deg = if cfg.max_rotation_deg > 0.0 {
            rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
        } else {
            0.0
        };
        let flip = rng.gen_bool(cfg.flip_p);
        let crop_origin = [rng.gen_range(0..=height - ch), rng.gen_range(0..=width - cw)];
        Ok(Self { angle_deg, flip, crop_origin, crop_size: [ch, cw] })
    }

    /// Source coordinates (pixel-center units) sampled by output pixel `(i, j)`.
    pub fn source(&self, i: usize, j: usize, height: usize, width: usize) -> (f64, f64) {
        let y = (self.crop_origin[0] + i) as f64;
        let mut x = (self.crop_origin[1] + j) as f64;
        if self.flip {
            x = (width - 1) as f64 - x;
        }
        if self.angle_deg == 0.0 {
            return (y, x);
        }
        let (cy, cx) = ((height - 1) as f64 / 2.0, (width - 1) as f64 / 2.0);
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dy, dx) = (y - cy, x - cx);
        (cy - s * dx + c * dy, cx + c * dx + s * dy)
    }

    /// Nearest source pixel, or `None` outside the canvas.
    pub fn nearest(&self, i: usize, j: usize, height: usize, width: usize) -> Option<(usize, usize)> {
        let (sy, sx) = self.source(i, j, height, width);
        let (ny, nx) = ((sy + 0.5).floor(), (sx + 0.5).floor());
        (ny >= 0.0 && nx >= 0.0 && ny < height as f64 && nx < width as f64).then_some((ny as usize, nx as usize))
    }

    fn check(&self, height: usize, width: usize) -> Result<()> {
        let [ch, cw] = self.crop_size;
        if ch == 0 || cw == 0 || self.crop_origin[0] + ch > height || self.crop_origin[1] + cw > width {
            return Err(Error::invalid(format!("crop {ch}x{cw} does not fit {height}x{width} frames")));
        }
        Ok(())
    }

    /// Bilinear warp; pixels mapping outside the canvas become 0.
    pub fn apply_image(&self, img: &Image) -> Result<Image> {
        let (h, w) = (img.height, img.width);
        self.check(h, w)?;
        let [oh, ow] = self.crop_size;
        let mut out = Image::zeros(oh, ow);
        let plane_out = oh * ow;
        for i in 0..oh {
            for j in 0..ow {
                if self.nearest(i, j, h, w).is_none() {
                    continue;
                }
                let (sy, sx) = self.source(i, j, h, w);
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
                let clamp = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
                let (ya, yb) = (clamp(y0, h), clamp(y0 + 1.0, h));
                let (xa, xb) = (clamp(x0, w), clamp(x0 + 1.0, w));
                for c in 0..3 {
                    let p = img.plane(c);
                    let top = p[ya * w + xa] * (1.0 - fx) + p[ya * w + xb] * fx;
                    let bot = p[yb * w + xa] * (1.0 - fx) + p[yb * w + xb] * fx;
                    out.data[c * plane_out + i * ow + j] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        Ok(out)
    }

    /// Nearest-neighbor warp; pixels mapping outside the canvas become the ignore index.
    pub fn apply_label(&self, map: &LabelMap) -> Result<LabelMap> {
        let (h, w) = (map.height, map.width);
        self.check(h, w)?;
        let [oh, ow] = self.crop_size;
        let mut data = vec![IGNORE_INDEX; oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                if let Some((y, x)) = self.nearest(i, j, h, w) {
                    data[i * ow + j] = map.data[y * w + x];
                }
            }
        }
        LabelMap::new(oh, ow, data)
    }
}

/// Applies one transform identically to every frame and to the label.
pub fn apply_augmentation(sample: &SequenceSample, aug: &Augmentation) -> Result<SequenceSample> {
    Ok(SequenceSample {
        frames: sample.frames.iter().map(|f| aug.apply_image(f)).collect::<Result<_>>()?,
        target_label: aug.apply_label(&sample.target_label)?,
        augmentation: Some(*aug),
        ..sample.clone()
    })
}

pub fn augment_sequence<R: Rng + ?Sized>(sample: &SequenceSample, cfg: &AugmentConfig, rng: &mut R) -> Result<SequenceSample> {
    let t = sample.target();
    let aug = Augmentation::draw(cfg, t.height, t.width, rng)?;
    apply_augmentation(sample, &aug)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_arithmetic() {
        assert_eq!(frame_indices(10, 1, 4).unwrap(), vec![7, 8, 9, 10]);
        assert_eq!(frame_indices(15, 5, 4).unwrap(), vec![0, 5, 10, 15]);
        assert!(frame_indices(5, 2, 4).is_err());
        assert_eq!(valid_targets(40, 5, 4), 15..40);
        assert!(valid_targets(10, 5, 4).is_empty());
    }

    #[test]
    fn crop_must_fit() {
        let cfg = AugmentConfig { crop: Some([65, 64]), ..AugmentConfig::default() };
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        assert!(Augmentation::draw(&cfg, 64, 64, &mut rng).is_err());
    }

    #[test]
    fn identity_transform_is_exact() {
        let img = Image { height: 2, width: 3, data: (0..18).map(|v| v as f32 / 17.0).collect() };
        let aug = Augmentation::identity(2, 3);
        assert_eq!(aug.apply_image(&img).unwrap(), img);
    }
}
