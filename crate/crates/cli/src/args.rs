use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use noisy_lstm::data::GenConfig;
use noisy_lstm::noise::{Corruption, NoiseKind};
use noisy_lstm::trainer::{Precision, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "noisy-lstm", version, about = "Video segmentation with a ConvLSTM and noisy context frames")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Subcommand, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    /// Generate the synthetic moving-shapes dataset.
    GenData(GenDataArgs),
    /// Two-phase training.
    Train(TrainArgs),
    /// mIoU on the validation clips, optionally with corrupted context frames.
    Eval(EvalArgs),
    /// One train + eval per parameter value and seed.
    Sweep(SweepArgs),
    /// Central-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// GenConfig JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training clips; validation clips default to a fifth of this.
    #[arg(long)]
    pub clips: Option<usize>,
    #[arg(long)]
    pub val_clips: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace an existing dataset in `--out`.
    #[arg(long)]
    pub force: bool,
    #[arg(skip)]
    pub resolved: Option<GenConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

/// Flag overrides applied on top of a training config file.
#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
pub struct TrainOverrides {
    /// unrelated_data, random_tensor, distortion, gaussian_blur or none.
    #[arg(long)]
    pub noise: Option<NoiseKind>,
    /// Replacement probability per context frame.
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub interval: Option<usize>,
    /// Sequences per batch.
    #[arg(long)]
    pub batch_n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub phase1_epochs: Option<usize>,
    #[arg(long)]
    pub phase2_epochs: Option<usize>,
    #[arg(long)]
    pub batches_per_epoch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(k) = self.noise {
            cfg.noise.kind = k;
        }
        if let Some(p) = self.p {
            cfg.noise.p = p;
        }
        if let Some(v) = self.interval {
            cfg.interval = v;
        }
        if let Some(v) = self.batch_n {
            cfg.batch_size = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.phase1_epochs {
            cfg.phase1_epochs = v;
        }
        if let Some(v) = self.phase2_epochs {
            cfg.phase2_epochs = v;
        }
        if let Some(v) = self.batches_per_epoch {
            cfg.batches_per_epoch = Some(v);
        }
        if let Some(v) = self.lr {
            cfg.base_lr = v;
        }
        if let Some(p) = self.precision {
            cfg.precision = p.into();
        }
    }
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// TrainConfig JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint; its directory must hold the run's sidecar files.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Stop once this many epochs (both phases) are complete.
    #[arg(long, hide = true)]
    pub stop_after: Option<usize>,
    #[arg(skip)]
    pub resolved: Option<TrainConfig>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// distortion, gaussian_blur or both.
    #[arg(long)]
    pub corrupt: Option<Corruption>,
    /// 1-based context frames to corrupt.
    #[arg(long, value_delimiter = ',', default_value = "1,3")]
    pub frames: Vec<usize>,
    /// Report directory; defaults to `eval` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write predicted and ground-truth label PGMs for every target.
    #[arg(long)]
    pub dump_predictions: bool,
    /// Defaults to the training run's sequence length.
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Defaults to the training run's interval.
    #[arg(long)]
    pub interval: Option<usize>,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum SweepParam {
    #[value(name = "interval")]
    #[serde(rename = "interval")]
    Interval,
    #[value(name = "noise_p")]
    #[serde(rename = "noise_p")]
    NoiseP,
    #[value(name = "noise_kind")]
    #[serde(rename = "noise_kind")]
    NoiseKind,
    #[value(name = "batch_n")]
    #[serde(rename = "batch_n")]
    BatchN,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Interval => "interval",
            SweepParam::NoiseP => "noise_p",
            SweepParam::NoiseKind => "noise_kind",
            SweepParam::BatchN => "batch_n",
        }
    }
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Base TrainConfig JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values of `--param`.
    #[arg(long)]
    pub values: String,
    /// Comma-separated seeds; each value is trained once per seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Also evaluate with these corruptions on `--frames`.
    #[arg(long)]
    pub corrupt: Option<Corruption>,
    #[arg(long, value_delimiter = ',', default_value = "1,3")]
    pub frames: Vec<usize>,
    /// Sub-runs executed concurrently.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(skip)]
    pub resolved: Option<TrainConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScopeArg {
    Op,
    Cell,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum FaultArg {
    #[value(name = "negate-tanh")]
    #[serde(rename = "negate-tanh")]
    NegateTanh,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "full")]
    pub scope: ScopeArg,
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub floor: f64,
    /// Elements checked per parameter group.
    #[arg(long, default_value_t = 64)]
    pub max_elements: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Deliberately break a backward rule (mutation control).
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<FaultArg>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write outputs here instead of the recorded location.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
