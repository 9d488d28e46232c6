//! Two-phase training: extractor + decoder with the ConvLSTM bypassed,
//! then the full network with a fresh cell.
//!
//! A run directory holds:
//!
//! ```text
//! train_config.json  resolved configuration
//! model.json         network shape, phase and precision
//! checkpoint.bin     parameters + batch-norm statistics, rewritten every epoch
//! optimizer.bin      Adam moments (records `m/<param>`, `v/<param>`)
//! state.json         progress counters and SHA-256 of the two binaries
//! train_log.csv      one row per epoch
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Mode, Tape};
use crate::checkpoint;
use crate::data::{
    augment_sequence, sample_sequence, valid_targets, AugmentConfig, Dataset, SequenceSample, VideoClip,
};
use crate::error::{Error, Result};
use crate::noise::{apply_noise, NoisePolicy, ReplacementMask};
use crate::ops::IGNORE_INDEX;
use crate::optim::{adam_step, clip_global_norm, lr_schedule, AdamState};
use crate::params::Parameterized;
use crate::scalar::Scalar;
use crate::seed::rng_for;
use crate::segnet::{ForwardOptions, ModelConfig, NoisyLstmNet, Phase};
use crate::tensor::Tensor;

const STREAM_INIT: u64 = 11;
const STREAM_CELL: u64 = 12;
const STREAM_EPOCH: u64 = 13;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const STATE_FILE: &str = "state.json";
pub const MODEL_FILE: &str = "model.json";
pub const CONFIG_FILE: &str = "train_config.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "epoch,phase,mean_loss,lr,replaced_frames_mean,wall_seconds";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Frames per sequence `T`.
    pub seq_len: usize,
    /// Sequences per batch `N`.
    pub batch_size: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    /// Defaults to `ceil(train_clips / batch_size)`.
    pub batches_per_epoch: Option<usize>,
    pub base_lr: f64,
    pub lr_drop_factor: f64,
    /// Frame gap `k` between sampled frames.
    pub interval: usize,
    pub noise: NoisePolicy,
    pub augment: AugmentConfig,
    /// Network shape; `crop` and `classes` are overridden from the dataset when absent.
    pub model: Option<ModelConfig>,
    pub seed: u64,
    pub precision: Precision,
    pub freeze_extractor: bool,
    /// Discard all Adam moments when phase 2 starts.
    pub reset_optimizer: bool,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seq_len: 4,
            batch_size: 4,
            phase1_epochs: 10,
            phase2_epochs: 10,
            batches_per_epoch: None,
            base_lr: 1e-4,
            lr_drop_factor: 10.0,
            interval: 1,
            noise: NoisePolicy::default(),
            augment: AugmentConfig::default(),
            model: None,
            seed: 0,
            precision: Precision::F32,
            freeze_extractor: false,
            reset_optimizer: true,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seq_len == 0 || self.batch_size == 0 || self.interval == 0 {
            return bad("seq_len, batch_size and interval must be positive".into());
        }
        if self.phase1_epochs == 0 || self.phase2_epochs == 0 {
            return bad("each phase needs at least one epoch".into());
        }
        if self.batches_per_epoch == Some(0) {
            return bad("batches_per_epoch must be positive".into());
        }
        if !(self.base_lr > 0.0) || !(self.lr_drop_factor >= 1.0) {
            return bad("base_lr must be positive and lr_drop_factor at least 1".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        self.noise.validate(self.seq_len)?;
        if let Some(m) = &self.model {
            m.validate()?;
        }
        Ok(())
    }

    /// The network shape for frames of the given dataset.
    pub fn resolve_model(&self, ds: &Dataset) -> Result<ModelConfig> {
        let crop = self.augment.crop.unwrap_or([ds.config.height, ds.config.width]);
        let model = match &self.model {
            Some(m) => m.clone(),
            None => ModelConfig { crop, classes: ds.config.classes, ..ModelConfig::default() },
        };
        model.validate()?;
        if model.crop != crop {
            return Err(Error::Config(format!(
                "network was constructed for {}x{} frames but training crops are {}x{}",
                model.crop[0], model.crop[1], crop[0], crop[1]
            )));
        }
        if model.classes != ds.config.classes {
            return Err(Error::Config(format!(
                "network predicts {} classes but the dataset has {}",
                model.classes, ds.config.classes
            )));
        }
        Ok(model)
    }

    pub fn batches_per_epoch(&self, ds: &Dataset) -> usize {
        self.batches_per_epoch.unwrap_or_else(|| ds.train.len().div_ceil(self.batch_size).max(1))
    }
}

/// Every `(clip index, target frame)` with full history.
pub fn target_pairs(clips: &[VideoClip], interval: usize, seq_len: usize) -> Vec<(usize, usize)> {
    clips
        .iter()
        .enumerate()
        .flat_map(|(c, clip)| valid_targets(clip.len(), interval, seq_len).map(move |t| (c, t)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub samples: Vec<SequenceSample>,
    pub masks: Vec<ReplacementMask>,
}

impl Batch {
    pub fn replaced(&self) -> usize {
        self.masks.iter().map(ReplacementMask::replaced).sum()
    }
}

/// `N` uniform draws of `(clip, target)`, each sampled, augmented and noised.
pub fn build_batch<R: Rng + ?Sized>(
    ds: &Dataset,
    pairs: &[(usize, usize)],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Batch> {
    if pairs.is_empty() {
        return Err(Error::Data(format!(
            "no training clip has the {} frames of history needed for T = {} at interval {}",
            (cfg.seq_len - 1) * cfg.interval + 1,
            cfg.seq_len,
            cfg.interval
        )));
    }
    let mut samples = Vec::with_capacity(cfg.batch_size);
    let mut masks = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let (c, t) = pairs[rng.gen_range(0..pairs.len())];
        let seq = sample_sequence(&ds.train[c], t, cfg.interval, cfg.seq_len)?;
        let seq = augment_sequence(&seq, &cfg.augment, rng)?;
        let (seq, mask) = apply_noise(&seq, &cfg.noise, rng, &ds.noise_pool)?;
        samples.push(seq);
        masks.push(mask);
    }
    Ok(Batch { samples, masks })
}

/// Frames as `[N·T, 3, H, W]` (sequence-major) and target labels as `N·H·W` bytes.
pub fn batch_tensors<T: Scalar>(samples: &[SequenceSample]) -> Result<(Tensor<T>, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (t_len, h, w) = (first.len(), first.target().height, first.target().width);
    let mut data = Vec::with_capacity(samples.len() * t_len * 3 * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.len() != t_len || s.frames.iter().any(|f| (f.height, f.width) != (h, w)) {
            return Err(Error::shape(format!("batch mixes sequence shapes; expected {t_len} frames of {h}x{w}")));
        }
        for f in &s.frames {
            data.extend(f.data.iter().map(|&v| T::of(f64::from(v))));
        }
        labels.extend_from_slice(&s.target_label.data);
    }
    Ok((Tensor::new(vec![samples.len() * t_len, 3, h, w], data)?, labels))
}

/// Splits a sequence-major frame tensor back into per-sequence frame lists.
pub fn regroup<T: Scalar>(flat: &Tensor<T>, seq_len: usize) -> Result<Vec<Vec<Tensor<T>>>> {
    flat.expect_rank(4, "regroup")?;
    if seq_len == 0 || !flat.dim(0).is_multiple_of(seq_len) {
        return Err(Error::shape(format!("batch of {} frames is not divisible by T = {seq_len}", flat.dim(0))));
    }
    let frame_shape = flat.shape()[1..].to_vec();
    let size: usize = frame_shape.iter().product();
    let mut frames = flat.data().chunks_exact(size);
    let mut out = Vec::new();
    for _ in 0..flat.dim(0) / seq_len {
        let mut seq = Vec::with_capacity(seq_len);
        for _ in 0..seq_len {
            let mut shape = vec![1];
            shape.extend_from_slice(&frame_shape);
            seq.push(Tensor::new(shape, frames.next().expect("length checked").to_vec())?);
        }
        out.push(seq);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub model: ModelConfig,
    pub phase: Phase,
    pub precision: Precision,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub phase: Phase,
    /// Completed epochs within `phase`.
    pub epoch: usize,
    pub step: u64,
    pub checkpoint_sha256: String,
    pub optimizer_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    /// 1-based across both phases.
    pub epoch: usize,
    pub phase: u8,
    pub mean_loss: f64,
    pub lr: f64,
    pub replaced_frames_mean: f64,
    pub wall_seconds: f64,
}

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.epoch, self.phase, self.mean_loss, self.lr, self.replaced_frames_mean, self.wall_seconds
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Data(format!("malformed log row `{line}`"));
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad())?,
            phase: f[1].parse().map_err(|_| bad())?,
            mean_loss: num(f[2])?,
            lr: num(f[3])?,
            replaced_frames_mean: num(f[4])?,
            wall_seconds: num(f[5])?,
        })
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    text.lines().skip(1).filter(|l| !l.trim().is_empty()).map(LogRow::parse).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    checkpoint::write_atomic(path, text.as_bytes())
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from the checkpoint at this path (its directory holds the sidecars).
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs have completed in total across both phases.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub rows: Vec<LogRow>,
    pub checkpoint: PathBuf,
    pub finished: bool,
}

/// Loads a trained network from a checkpoint and its sibling `model.json`.
pub fn load_model<T: Scalar>(ckpt: &Path) -> Result<NoisyLstmNet<T>> {
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let saved: SavedModel = read_json(&dir.join(MODEL_FILE))?;
    let mut net = NoisyLstmNet::new(saved.model, &mut rng_for(0, &[]))?;
    net.phase = saved.phase;
    let bytes = fs::read(ckpt).map_err(|e| Error::Checkpoint(format!("{}: {e}", ckpt.display())))?;
    net.load_state(checkpoint::decode(&bytes)?)?;
    Ok(net)
}

struct RunFiles {
    dir: PathBuf,
}

impl RunFiles {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn save<T: Scalar>(&self, net: &mut NoisyLstmNet<T>, adam: &AdamState<T>, state_base: (Phase, usize)) -> Result<TrainState> {
        let ckpt = checkpoint::encode(&net.state().iter().map(|(n, t)| (n.clone(), t)).collect::<Vec<_>>());
        let opt = checkpoint::encode(&adam.records());
        checkpoint::write_atomic(&self.path(CHECKPOINT_FILE), &ckpt)?;
        checkpoint::write_atomic(&self.path(OPTIMIZER_FILE), &opt)?;
        let state = TrainState {
            phase: state_base.0,
            epoch: state_base.1,
            step: adam.step,
            checkpoint_sha256: sha256_hex(&ckpt),
            optimizer_sha256: sha256_hex(&opt),
        };
        write_json(&self.path(STATE_FILE), &state)?;
        Ok(state)
    }
}

fn numeric_abort(e: Error) -> Error {
    match e {
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::NonFiniteParamGradient(_) => {
            Error::NumericAbort(e.to_string())
        }
        other => other,
    }
}

/// Runs (or resumes) training, writing everything into `out_dir`.
pub fn train<T: Scalar>(ds: &Dataset, cfg: &TrainConfig, out_dir: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.resolve_model(ds)?;
    let pairs = target_pairs(&ds.train, cfg.interval, cfg.seq_len);
    if pairs.is_empty() {
        return Err(Error::Data(format!(
            "no training clip has the {} frames of history needed for T = {} at interval {}",
            (cfg.seq_len - 1) * cfg.interval + 1,
            cfg.seq_len,
            cfg.interval
        )));
    }
    if cfg.noise.kind == crate::noise::NoiseKind::UnrelatedData && cfg.noise.p > 0.0 && ds.noise_pool.is_empty() {
        return Err(Error::Data("unrelated_data noise requested but the noise pool is empty".into()));
    }
    fs::create_dir_all(out_dir)?;
    let files = RunFiles { dir: out_dir.to_path_buf() };
    let batches = cfg.batches_per_epoch(ds);

    let mut net: NoisyLstmNet<T>;
    let mut adam: AdamState<T>;
    let (mut phase, mut done): (Phase, usize);
    let mut rows: Vec<LogRow>;
    match &opts.resume {
        Some(ckpt) => {
            let src = ckpt.parent().unwrap_or(Path::new("."));
            let stored: TrainConfig = read_json(&src.join(CONFIG_FILE))?;
            if &stored != cfg {
                return Err(Error::Config(format!(
                    "training configuration differs from the one recorded in {}",
                    src.join(CONFIG_FILE).display()
                )));
            }
            let state: TrainState = read_json(&src.join(STATE_FILE))?;
            let actual = sha256_file(ckpt).map_err(|e| Error::Checkpoint(format!("{}: {e}", ckpt.display())))?;
            if actual != state.checkpoint_sha256 {
                return Err(Error::Checkpoint(format!(
                    "checksum mismatch for {}: expected sha256 {}, found {actual}",
                    ckpt.display(),
                    state.checkpoint_sha256
                )));
            }
            let opt_path = src.join(OPTIMIZER_FILE);
            let opt_sum = sha256_file(&opt_path)?;
            if opt_sum != state.optimizer_sha256 {
                return Err(Error::Checkpoint(format!(
                    "checksum mismatch for {}: expected sha256 {}, found {opt_sum}",
                    opt_path.display(),
                    state.optimizer_sha256
                )));
            }
            net = load_model(ckpt)?;
            adam = AdamState::from_records(checkpoint::decode(&fs::read(&opt_path)?)?, state.step)?;
            phase = state.phase;
            done = state.epoch;
            let completed = match phase {
                Phase::Phase1 => done,
                Phase::Phase2 => cfg.phase1_epochs + done,
            };
            rows = read_log(&src.join(LOG_FILE))?.into_iter().take(completed).collect();
            if src != out_dir {
                for name in [CHECKPOINT_FILE, OPTIMIZER_FILE, STATE_FILE, MODEL_FILE] {
                    fs::copy(src.join(name), out_dir.join(name))?;
                }
            }
        }
        None => {
            net = NoisyLstmNet::new(model_cfg.clone(), &mut rng_for(cfg.seed, &[STREAM_INIT]))?;
            adam = AdamState::new();
            phase = Phase::Phase1;
            done = 0;
            rows = Vec::new();
        }
    }
    write_json(&files.path(CONFIG_FILE), cfg)?;
    let mut log = String::from(LOG_HEADER);
    log.push('\n');
    for r in &rows {
        log.push_str(&r.csv());
        log.push('\n');
    }
    checkpoint::write_atomic(&files.path(LOG_FILE), log.as_bytes())?;
    let write_model = |phase: Phase| {
        write_json(&files.path(MODEL_FILE), &SavedModel { model: model_cfg.clone(), phase, precision: cfg.precision })
    };
    write_model(phase)?;

    loop {
        let total = match phase {
            Phase::Phase1 => cfg.phase1_epochs,
            Phase::Phase2 => cfg.phase2_epochs,
        };
        if done == total {
            if phase == Phase::Phase2 {
                break;
            }
            phase = Phase::Phase2;
            done = 0;
            net.start_phase_two(&mut rng_for(cfg.seed, &[STREAM_CELL]));
            if cfg.reset_optimizer {
                adam = AdamState::new();
            }
            write_model(phase)?;
            continue;
        }
        if opts.stop_after.is_some_and(|s| rows.len() >= s) {
            return Ok(TrainOutcome { rows, checkpoint: files.path(CHECKPOINT_FILE), finished: false });
        }
        let started = Instant::now();
        let lr = lr_schedule(done, total, cfg.base_lr, cfg.lr_drop_factor);
        let phase_id = if phase == Phase::Phase1 { 1u8 } else { 2 };
        let mut rng = rng_for(cfg.seed, &[STREAM_EPOCH, u64::from(phase_id), done as u64]);
        let fwd = ForwardOptions { mode: Mode::Train, train_extractor: !(phase == Phase::Phase2 && cfg.freeze_extractor), train_rest: true };
        let (mut loss_sum, mut replaced) = (0.0, 0usize);
        for _ in 0..batches {
            let batch = build_batch(ds, &pairs, cfg, &mut rng)?;
            replaced += batch.replaced();
            let (frames, labels) = batch_tensors::<T>(&batch.samples)?;
            let mut tape = Tape::new();
            let x = tape.constant(frames);
            let logits = net.forward(&mut tape, x, cfg.seq_len, fwd).map_err(numeric_abort)?;
            let loss = tape.softmax_ce_loss(logits, &labels, Some(IGNORE_INDEX)).map_err(numeric_abort)?;
            let value = tape.value(loss).item()?.as_f64();
            if !value.is_finite() {
                return Err(Error::NumericAbort(format!("loss became {value} at step {}", adam.step + 1)));
            }
            tape.backward(loss).map_err(numeric_abort)?;
            let mut grads = tape.param_grads()?;
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            adam_step(net.params_mut(), &grads, &mut adam, lr).map_err(numeric_abort)?;
            loss_sum += value;
        }
        done += 1;
        files.save(&mut net, &adam, (phase, done))?;
        let row = LogRow {
            epoch: rows.len() + 1,
            phase: phase_id,
            mean_loss: loss_sum / batches as f64,
            lr,
            replaced_frames_mean: replaced as f64 / (batches * cfg.batch_size) as f64,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log.push_str(&row.csv());
        log.push('\n');
        checkpoint::write_atomic(&files.path(LOG_FILE), log.as_bytes())?;
        rows.push(row);
    }
    Ok(TrainOutcome { rows, checkpoint: files.path(CHECKPOINT_FILE), finished: true })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_rows_round_trip() {
        let r = LogRow { epoch: 3, phase: 2, mean_loss: 0.123456789, lr: 1e-5, replaced_frames_mean: 1.375, wall_seconds: 2.5 };
        assert_eq!(LogRow::parse(&r.csv()).unwrap(), r);
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn config_json_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"seed": 3, "noise": {"noise_kind": "none"}}"#).unwrap();
        assert_eq!(c.seq_len, 4);
        assert_eq!(c.seed, 3);
        c.validate().unwrap();
        assert!(serde_json::from_str::<TrainConfig>(r#"{"sequence": 4}"#).is_err());
    }
}
