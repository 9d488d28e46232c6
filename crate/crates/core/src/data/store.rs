//! On-disk dataset layout:
//!
//! ```text
//! DIR/meta.json
//! DIR/train/clip_0000/{meta.json, frame_000.ppm, label_000.pgm, ...}
//! DIR/val/clip_0000/...
//! DIR/noise_pool/pool_000.ppm
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::generate::{Dataset, GenConfig, ShapeTrack, VideoClip};
use super::image::{read_pgm, read_ppm, write_pgm, write_ppm, RgbImage};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    format: u32,
    config: GenConfig,
    fps: f64,
    train_clips: usize,
    val_clips: usize,
    noise_pool: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipMeta {
    id: usize,
    frames: usize,
    fps: f64,
    shapes: Vec<ShapeTrack>,
}

fn clip_dir(root: &Path, split: &str, id: usize) -> PathBuf {
    root.join(split).join(format!("clip_{id:04}"))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(fs::write(path, text)?)
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| data_err(path, e))
}

fn save_clip(root: &Path, split: &str, clip: &VideoClip) -> Result<()> {
    let dir = clip_dir(root, split, clip.id);
    fs::create_dir_all(&dir)?;
    for (t, (f, l)) in clip.frames.iter().zip(&clip.labels).enumerate() {
        write_ppm(&dir.join(format!("frame_{t:03}.ppm")), f)?;
        write_pgm(&dir.join(format!("label_{t:03}.pgm")), l)?;
    }
    let meta = ClipMeta { id: clip.id, frames: clip.len(), fps: clip.fps, shapes: clip.shapes.clone() };
    write_json(&dir.join("meta.json"), &meta)
}

fn load_clip(root: &Path, split: &str, id: usize, cfg: &GenConfig) -> Result<VideoClip> {
    let dir = clip_dir(root, split, id);
    let meta: ClipMeta = read_json(&dir.join("meta.json"))?;
    if meta.id != id {
        return Err(data_err(&dir, format!("clip id {} does not match directory", meta.id)));
    }
    let mut frames = Vec::with_capacity(meta.frames);
    let mut labels = Vec::with_capacity(meta.frames);
    for t in 0..meta.frames {
        let (fp, lp) = (dir.join(format!("frame_{t:03}.ppm")), dir.join(format!("label_{t:03}.pgm")));
        let f = read_ppm(&fp)?;
        let l = read_pgm(&lp)?;
        if (f.height, f.width) != (cfg.height, cfg.width) || (l.height, l.width) != (cfg.height, cfg.width) {
            return Err(data_err(&fp, format!("expected {}x{} frames and labels", cfg.height, cfg.width)));
        }
        if let Some(&bad) = l.data.iter().find(|&&v| v as usize >= cfg.classes && v != crate::ops::IGNORE_INDEX) {
            return Err(data_err(&lp, format!("label {bad} outside 0..{}", cfg.classes)));
        }
        frames.push(f);
        labels.push(l);
    }
    Ok(VideoClip { id, fps: meta.fps, frames, labels, shapes: meta.shapes })
}

pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    for (split, clips) in [("train", &ds.train), ("val", &ds.val)] {
        fs::create_dir_all(root.join(split))?;
        for clip in clips {
            save_clip(root, split, clip)?;
        }
    }
    let pool = root.join("noise_pool");
    fs::create_dir_all(&pool)?;
    for (i, img) in ds.noise_pool.iter().enumerate() {
        write_ppm(&pool.join(format!("pool_{i:03}.ppm")), img)?;
    }
    let meta = DatasetMeta {
        format: FORMAT_VERSION,
        config: ds.config.clone(),
        fps: ds.config.fps,
        train_clips: ds.train.len(),
        val_clips: ds.val.len(),
        noise_pool: ds.noise_pool.len(),
    };
    write_json(&root.join("meta.json"), &meta)
}

/// Every `*.ppm` in the directory, in file-name order. Extra images
/// dropped into the pool directory are picked up too.
pub fn load_noise_pool(dir: &Path) -> Result<Vec<RgbImage>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| data_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_ppm(p)).collect()
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let meta_path = root.join("meta.json");
    if !meta_path.is_file() {
        return Err(data_err(root, "not a dataset directory (meta.json missing)"));
    }
    let meta: DatasetMeta = read_json(&meta_path)?;
    if meta.format != FORMAT_VERSION {
        return Err(data_err(&meta_path, format!("unsupported dataset format {}", meta.format)));
    }
    meta.config.validate().map_err(|e| data_err(&meta_path, e))?;
    let cfg = meta.config;
    let train = (0..meta.train_clips).map(|i| load_clip(root, "train", i, &cfg)).collect::<Result<_>>()?;
    let val = (0..meta.val_clips).map(|i| load_clip(root, "val", i, &cfg)).collect::<Result<_>>()?;
    let noise_pool = load_noise_pool(&root.join("noise_pool"))?;
    Ok(Dataset { config: cfg, train, val, noise_pool })
}
