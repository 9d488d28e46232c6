//! Frame and label containers plus binary PPM/PGM codecs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ops::resample;

/// 8-bit interleaved RGB, the on-disk frame representation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

/// Planar 3-channel float frame with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Per-pixel class ids; [`IGNORE_INDEX`](crate::ops::IGNORE_INDEX) marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Data(format!("RGB buffer of {} bytes does not fit {height}x{width}", data.len())));
        }
        Ok(Self { height, width, data })
    }
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; 3 * height * width] }
    }

    pub fn from_rgb(rgb: &RgbImage) -> Self {
        let plane = rgb.height * rgb.width;
        let mut data = vec![0.0; 3 * plane];
        for (p, px) in rgb.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = f32::from(px[c]) / 255.0;
            }
        }
        Self { height: rgb.height, width: rgb.width, data }
    }

    pub fn to_rgb(&self) -> RgbImage {
        let plane = self.height * self.width;
        let mut data = vec![0; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                data[3 * p + c] = (self.data[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        RgbImage { height: self.height, width: self.width, data }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Bilinear resize (half-pixel centers, edge clamp).
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let data = resample::bilinear(&self.data, 3, self.height, self.width, height, width);
        Self { height, width, data }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Data(format!("label buffer of {} bytes does not fit {height}x{width}", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    /// Pixel count per class id `0..256`.
    pub fn histogram(&self) -> [usize; 256] {
        let mut h = [0; 256];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }
}

fn encode_netpbm(magic: &str, width: usize, height: usize, body: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(body);
    out
}

fn decode_netpbm(bytes: &[u8], magic: &[u8], depth: usize, what: &str) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Data(format!("{what}: {m}"));
    if !bytes.starts_with(magic) {
        return Err(bad(&format!("expected {} header", String::from_utf8_lossy(magic))));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header field"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(bad(&format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing separator after header"));
    }
    let body = &bytes[pos + 1..];
    if w == 0 || h == 0 || body.len() != w * h * depth {
        return Err(bad(&format!("expected {} data bytes for {w}x{h}, found {}", w * h * depth, body.len())));
    }
    Ok((w, h, body.to_vec()))
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    encode_netpbm("P6", img.width, img.height, &img.data)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (w, h, data) = decode_netpbm(bytes, b"P6", 3, "PPM")?;
    RgbImage::new(h, w, data)
}

pub fn encode_pgm(map: &LabelMap) -> Vec<u8> {
    encode_netpbm("P5", map.width, map.height, &map.data)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let (w, h, data) = decode_netpbm(bytes, b"P5", 1, "PGM")?;
    LabelMap::new(h, w, data)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&read(path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    decode_pgm(&read(path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    Ok(std::fs::write(path, encode_ppm(img))?)
}

pub fn write_pgm(path: &Path, map: &LabelMap) -> Result<()> {
    Ok(std::fs::write(path, encode_pgm(map))?)
}
