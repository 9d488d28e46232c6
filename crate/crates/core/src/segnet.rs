//! The end-to-end segmentation network.
//!
//! All `T·N` frames of a batch go through one shared extractor pass (so
//! batch normalization sees every frame), the feature maps are regrouped
//! into their sequences, the ConvLSTM folds each sequence into its last
//! hidden state, and a pyramid-pooling decoder turns that state into
//! per-pixel class logits for the target frame.
//!
//! Frames are laid out sequence-major: frame `t` of sequence `n` sits at
//! batch index `n·T + t`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape, Var};
use crate::convlstm::{CellInit, ConvLstmCell};
use crate::error::{Error, Result};
use crate::ops::{BatchNormStats, ConvGeometry};
use crate::params::Parameterized;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Network shape. Stored as JSON next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input channels followed by the output channels of the four extractor blocks.
    pub channels: Vec<usize>,
    /// Pyramid pooling grid sizes.
    pub bins: Vec<usize>,
    /// Frame size `[H, W]` the network is built for.
    pub crop: [usize; 2],
    pub classes: usize,
    #[serde(default = "default_forget_bias")]
    pub forget_bias: f64,
}

fn default_forget_bias() -> f64 {
    1.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: vec![3, 16, 32, 64, 64],
            bins: vec![1, 2, 3, 6],
            crop: [64, 64],
            classes: 4,
            forget_bias: 1.0,
        }
    }
}

pub const DOWNSAMPLE: usize = 4;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels.len() != 5 || self.channels.contains(&0) {
            return bad(format!("channels must list 5 positive sizes, got {:?}", self.channels));
        }
        if !self.feature_channels().is_multiple_of(4) {
            return bad(format!("feature channels {} must be divisible by 4", self.feature_channels()));
        }
        let [h, w] = self.crop;
        if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return bad(format!("crop {h}x{w} must be positive multiples of {DOWNSAMPLE}"));
        }
        let (fh, fw) = self.feature_size();
        if self.bins.is_empty() || self.bins.iter().any(|&b| b == 0 || b > fh || b > fw) {
            return bad(format!("bins {:?} must lie in 1..={} for {fh}x{fw} feature maps", self.bins, fh.min(fw)));
        }
        if !(2..255).contains(&self.classes) {
            return bad(format!("classes must be in 2..255, got {}", self.classes));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.channels[4]
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.crop[0] / DOWNSAMPLE, self.crop[1] / DOWNSAMPLE)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// ConvLSTM bypassed: the target frame's features feed the decoder.
    Phase1,
    /// Full temporal path.
    Phase2,
}

/// How parameters are registered on the tape for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub train_extractor: bool,
    pub train_rest: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self { mode: Mode::Train, train_extractor: true, train_rest: true }
    }

    pub fn eval() -> Self {
        Self { mode: Mode::Eval, train_extractor: false, train_rest: false }
    }
}

/// conv (no bias) + batch norm + ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T> {
    name: String,
    geom: ConvGeometry,
    pub kernel: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: BatchNormStats<T>,
}

impl<T: Scalar> ConvBlock<T> {
    fn new<R: Rng + ?Sized>(name: String, cin: usize, cout: usize, geom: ConvGeometry, rng: &mut R) -> Self {
        let bound = (6.0 / (cin * 9) as f64).sqrt();
        Self {
            name,
            geom,
            kernel: Tensor::uniform(&[cout, cin, 3, 3], -bound, bound, rng),
            gamma: Tensor::ones(&[cout]),
            beta: Tensor::zeros(&[cout]),
            stats: BatchNormStats::new(cout),
        }
    }

    fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode, trainable: bool) -> Result<Var> {
        let k = tape.param(&format!("{}.conv.W", self.name), &self.kernel, trainable);
        let g = tape.param(&format!("{}.bn.gamma", self.name), &self.gamma, trainable);
        let b = tape.param(&format!("{}.bn.beta", self.name), &self.beta, trainable);
        let y = tape.conv2d(x, k, None, self.geom)?;
        let y = tape.batch_norm(y, g, b, &mut self.stats, mode)?;
        tape.relu(y)
    }

    fn params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{}.conv.W", self.name), &self.kernel));
        out.push((format!("{}.bn.gamma", self.name), &self.gamma));
        out.push((format!("{}.bn.beta", self.name), &self.beta));
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{}.conv.W", self.name), &mut self.kernel));
        out.push((format!("{}.bn.gamma", self.name), &mut self.gamma));
        out.push((format!("{}.bn.beta", self.name), &mut self.beta));
    }

    fn buffers_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{}.bn.running_mean", self.name), &mut self.stats.mean));
        out.push((format!("{}.bn.running_var", self.name), &mut self.stats.var));
    }
}

/// 1x1 convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Pointwise<T> {
    name: String,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Pointwise<T> {
    fn new<R: Rng + ?Sized>(name: String, cin: usize, cout: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (cin as f64).sqrt();
        Self {
            name,
            kernel: Tensor::uniform(&[cout, cin, 1, 1], -bound, bound, rng),
            bias: Tensor::zeros(&[cout]),
        }
    }

    fn forward(&self, tape: &mut Tape<T>, x: Var, trainable: bool) -> Result<Var> {
        let k = tape.param(&format!("{}.W", self.name), &self.kernel, trainable);
        let b = tape.param(&format!("{}.b", self.name), &self.bias, trainable);
        tape.conv2d(x, k, Some(b), ConvGeometry::POINTWISE)
    }

    fn params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{}.W", self.name), &self.kernel));
        out.push((format!("{}.b", self.name), &self.bias));
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{}.W", self.name), &mut self.kernel));
        out.push((format!("{}.b", self.name), &mut self.bias));
    }
}

/// Four conv blocks: two stride-2, then dilation 2 and dilation 4.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<T> {
    pub blocks: Vec<ConvBlock<T>>,
}

impl<T: Scalar> FeatureExtractor<T> {
    fn new<R: Rng + ?Sized>(channels: &[usize], rng: &mut R) -> Self {
        let geoms = [
            ConvGeometry::new(2, 1, 1),
            ConvGeometry::new(2, 1, 1),
            ConvGeometry::new(1, 2, 2),
            ConvGeometry::new(1, 4, 4),
        ];
        let blocks = geoms
            .iter()
            .enumerate()
            .map(|(i, &g)| ConvBlock::new(format!("extractor.block{}", i + 1), channels[i], channels[i + 1], g, rng))
            .collect();
        Self { blocks }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode, trainable: bool) -> Result<Var> {
        self.blocks.iter_mut().try_fold(x, |x, b| b.forward(tape, x, mode, trainable))
    }
}

/// Pyramid pooling over the ConvLSTM output, two conv blocks, a 1x1
/// classifier and a bilinear upsample back to frame size.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub bins: Vec<usize>,
    pub ppm: Vec<Pointwise<T>>,
    pub conv1: ConvBlock<T>,
    pub conv2: ConvBlock<T>,
    pub classifier: Pointwise<T>,
}

impl<T: Scalar> Decoder<T> {
    fn new<R: Rng + ?Sized>(channels: usize, bins: &[usize], classes: usize, rng: &mut R) -> Self {
        let reduced = channels / 4;
        let ppm = bins
            .iter()
            .map(|b| Pointwise::new(format!("decoder.ppm.bin{b}.conv"), channels, reduced, rng))
            .collect();
        let merged = channels + reduced * bins.len();
        Self {
            bins: bins.to_vec(),
            ppm,
            conv1: ConvBlock::new("decoder.conv1".into(), merged, channels, ConvGeometry::SAME_3X3, rng),
            conv2: ConvBlock::new("decoder.conv2".into(), channels, channels, ConvGeometry::SAME_3X3, rng),
            classifier: Pointwise::new("decoder.classifier".into(), channels, classes, rng),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, g: Var, out_size: (usize, usize), mode: Mode, trainable: bool) -> Result<Var> {
        let (h, w) = (tape.value(g).dim(2), tape.value(g).dim(3));
        let mut branches = vec![g];
        for (bin, conv) in self.bins.iter().zip(&self.ppm) {
            let p = tape.avg_pool(g, *bin, *bin)?;
            let p = conv.forward(tape, p, trainable)?;
            branches.push(tape.upsample(p, h, w)?);
        }
        let x = tape.concat(&branches, 1)?;
        let x = self.conv1.forward(tape, x, mode, trainable)?;
        let x = self.conv2.forward(tape, x, mode, trainable)?;
        let logits = self.classifier.forward(tape, x, trainable)?;
        tape.upsample(logits, out_size.0, out_size.1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisyLstmNet<T> {
    config: ModelConfig,
    pub phase: Phase,
    pub extractor: FeatureExtractor<T>,
    pub cell: ConvLstmCell<T>,
    pub decoder: Decoder<T>,
}

/// Batch indices of frame `t` across `sequences` sequences of length `seq_len`.
pub fn frame_indices(sequences: usize, seq_len: usize, t: usize) -> Vec<usize> {
    (0..sequences).map(|n| n * seq_len + t).collect()
}

impl<T: Scalar> NoisyLstmNet<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ch = config.feature_channels();
        let (fh, fw) = config.feature_size();
        let extractor = FeatureExtractor::new(&config.channels, rng);
        let decoder = Decoder::new(ch, &config.bins, config.classes, rng);
        let cell = ConvLstmCell::new(ch, ch, fh, fw, CellInit { forget_bias: config.forget_bias }, rng);
        Ok(Self { config, phase: Phase::Phase1, extractor, cell, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Switches to the full temporal path with a freshly initialized cell.
    pub fn start_phase_two<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let ch = self.config.feature_channels();
        let (fh, fw) = self.config.feature_size();
        let init = CellInit { forget_bias: self.config.forget_bias };
        self.cell = ConvLstmCell::new(ch, ch, fh, fw, init, rng);
        self.phase = Phase::Phase2;
    }

    fn check_frames(&self, tape: &Tape<T>, frames: Var, seq_len: usize) -> Result<usize> {
        let s = tape.value(frames).shape();
        let [h, w] = self.config.crop;
        if s.len() != 4 || s[1] != self.config.channels[0] {
            return Err(Error::shape(format!(
                "expected frames [T*N,{},{h},{w}], got {s:?}",
                self.config.channels[0]
            )));
        }
        if (s[2], s[3]) != (h, w) {
            return Err(Error::shape(format!(
                "network was constructed for {h}x{w} frames but got {}x{}",
                s[2], s[3]
            )));
        }
        if seq_len == 0 || !s[0].is_multiple_of(seq_len) {
            return Err(Error::shape(format!("batch of {} frames is not divisible by T = {seq_len}", s[0])));
        }
        Ok(s[0] / seq_len)
    }

    /// One extractor pass over the whole flattened batch.
    pub fn extract_features(&mut self, tape: &mut Tape<T>, frames: Var, seq_len: usize, opts: ForwardOptions) -> Result<Var> {
        self.check_frames(tape, frames, seq_len)?;
        self.extractor.forward(tape, frames, opts.mode, opts.train_extractor)
    }

    /// Logits `[N,C,H,W]` for the target frame of each sequence.
    pub fn forward(&mut self, tape: &mut Tape<T>, frames: Var, seq_len: usize, opts: ForwardOptions) -> Result<Var> {
        let n = self.check_frames(tape, frames, seq_len)?;
        let [h, w] = self.config.crop;
        let g = match self.phase {
            Phase::Phase1 if opts.mode == Mode::Eval => {
                // Eval-mode BN is per frame, so context frames can be skipped outright.
                let targets = tape.select_batch(frames, &frame_indices(n, seq_len, seq_len - 1))?;
                self.extractor.forward(tape, targets, opts.mode, opts.train_extractor)?
            }
            Phase::Phase1 => {
                let z = self.extract_features(tape, frames, seq_len, opts)?;
                tape.select_batch(z, &frame_indices(n, seq_len, seq_len - 1))?
            }
            Phase::Phase2 => {
                let z = self.extract_features(tape, frames, seq_len, opts)?;
                let zs = (0..seq_len)
                    .map(|t| tape.select_batch(z, &frame_indices(n, seq_len, t)))
                    .collect::<Result<Vec<_>>>()?;
                self.cell.encode(tape, &zs, opts.train_rest)?
            }
        };
        self.decoder.forward(tape, g, (h, w), opts.mode, opts.train_rest)
    }

    /// Running batch-norm statistics, by name.
    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for b in &mut self.extractor.blocks {
            b.buffers_mut(&mut out);
        }
        self.decoder.conv1.buffers_mut(&mut out);
        self.decoder.conv2.buffers_mut(&mut out);
        out
    }

    /// Everything a checkpoint stores: parameters, then running statistics.
    pub fn state(&mut self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self.params().into_iter().map(|(n, t)| (n, t.clone())).collect();
        out.extend(self.buffers_mut().into_iter().map(|(n, t)| (n, t.clone())));
        out
    }

    /// Restores [`state`](Self::state); names and shapes must match exactly.
    pub fn load_state(&mut self, records: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut records: std::collections::HashMap<String, Tensor<T>> = records.into_iter().collect();
        let mut fill = |kind: &str, slots: Vec<(String, &mut Tensor<T>)>| -> Result<()> {
            for (name, slot) in slots {
                let t = records
                    .remove(name.as_str())
                    .ok_or_else(|| Error::Checkpoint(format!("missing {kind} `{name}`")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{kind} `{name}` has shape {:?}, model expects {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t;
            }
            Ok(())
        };
        fill("parameter", self.params_mut())?;
        fill("buffer", self.buffers_mut())?;
        if let Some(extra) = records.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected record `{extra}`")));
        }
        Ok(())
    }
}

impl<T: Scalar> Parameterized<T> for NoisyLstmNet<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for b in &self.extractor.blocks {
            b.params(&mut out);
        }
        out.extend(self.cell.params());
        for p in &self.decoder.ppm {
            p.params(&mut out);
        }
        self.decoder.conv1.params(&mut out);
        self.decoder.conv2.params(&mut out);
        self.decoder.classifier.params(&mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for b in &mut self.extractor.blocks {
            b.params_mut(&mut out);
        }
        out.extend(self.cell.params_mut());
        for p in &mut self.decoder.ppm {
            p.params_mut(&mut out);
        }
        self.decoder.conv1.params_mut(&mut out);
        self.decoder.conv2.params_mut(&mut out);
        self.decoder.classifier.params_mut(&mut out);
        out
    }
}

/// Per-pixel argmax over classes; ties go to the lowest class id.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<Vec<u8>>> {
    logits.expect_rank(4, "argmax")?;
    let (n, c, plane) = (logits.dim(0), logits.dim(1), logits.dim(2) * logits.dim(3));
    let x = logits.data();
    Ok((0..n)
        .map(|b| {
            (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..c {
                        if x[(b * c + k) * plane + p] > x[(b * c + best) * plane + p] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig { channels: vec![3, 4, 4, 8, 8], bins: vec![1, 2, 4], crop: [16, 16], classes: 3, forget_bias: 1.0 }
    }

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        let bad = ModelConfig { bins: vec![1, 2, 3, 6, 32], ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn feature_map_is_quarter_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = NoisyLstmNet::<f32>::new(ModelConfig::default(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let frames = tape.constant(Tensor::uniform(&[16, 3, 64, 64], 0.0, 1.0, &mut rng));
        let z = net.extract_features(&mut tape, frames, 4, ForwardOptions::train()).unwrap();
        assert_eq!(tape.value(z).shape(), &[16, 64, 16, 16]);
    }

    #[test]
    fn batch_must_divide_by_sequence_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = NoisyLstmNet::<f32>::new(small_config(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let frames = tape.constant(Tensor::zeros(&[6, 3, 16, 16]));
        assert!(net.forward(&mut tape, frames, 4, ForwardOptions::train()).is_err());
        let frames = tape.constant(Tensor::zeros(&[4, 3, 20, 16]));
        let err = net.forward(&mut tape, frames, 4, ForwardOptions::eval()).unwrap_err();
        assert!(err.to_string().contains("16x16"), "{err}");
    }

    #[test]
    fn argmax_ties_pick_lowest_class() {
        let logits = Tensor::<f64>::new(vec![1, 4, 1, 2], vec![0.0, 0.0, 5.0, 1.0, 1.0, 2.0, 5.0, 0.0]).unwrap();
        assert_eq!(argmax_labels(&logits).unwrap(), vec![vec![1, 2]]);
    }

    #[test]
    fn state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut a = NoisyLstmNet::<f64>::new(small_config(), &mut rng).unwrap();
        let mut b = NoisyLstmNet::<f64>::new(small_config(), &mut rng).unwrap();
        assert_ne!(a, b);
        b.load_state(a.state()).unwrap();
        assert_eq!(a.state(), b.state());
        let mut extra = a.state();
        extra.push(("bogus".into(), Tensor::zeros(&[1])));
        assert!(b.load_state(extra).is_err());
    }
}
