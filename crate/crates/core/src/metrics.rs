//! Confusion-matrix mIoU and clean-vs-corrupted evaluation.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{sample_sequence, LabelMap, SequenceSample, VideoClip};
use crate::error::{Error, Result};
use crate::noise::{corrupt_for_eval, Corruption, NoiseParams};
use crate::ops::IGNORE_INDEX;
use crate::scalar::Scalar;
use crate::seed::rng_for;
use crate::segnet::{argmax_labels, ForwardOptions, NoisyLstmNet};
use crate::trainer::{batch_tensors, target_pairs};

const STREAM_CORRUPT: u64 = 21;

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tallies every pixel whose ground truth is not the ignore index.
    pub fn update(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (truth.height, truth.width) {
            return Err(Error::shape(format!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.height, pred.width, truth.height, truth.width
            )));
        }
        let c = self.classes;
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            if t == IGNORE_INDEX {
                continue;
            }
            if t as usize >= c || p as usize >= c {
                return Err(Error::invalid(format!("class id {} outside 0..{c}", if t as usize >= c { t } else { p })));
            }
        }
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            if t != IGNORE_INDEX {
                self.counts[t as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape(format!("cannot merge {}-class and {}-class matrices", self.classes, other.classes)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU (`None` for classes absent from truth and prediction)
    /// and the mean over the rest.
    pub fn miou(&self) -> Result<MiouReport> {
        let c = self.classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let fp: u64 = (0..c).filter(|&t| t != k).map(|t| self.get(t, k)).sum();
                let fn_: u64 = (0..c).filter(|&p| p != k).map(|p| self.get(k, p)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::invalid("every class is absent; mIoU is undefined"));
        }
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        Ok(MiouReport { per_class, mean })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Anything that maps sequences to target-frame label maps.
pub trait Segmenter {
    fn segment(&mut self, batch: &[SequenceSample]) -> Result<Vec<LabelMap>>;
}

impl<T: Scalar> Segmenter for NoisyLstmNet<T> {
    fn segment(&mut self, batch: &[SequenceSample]) -> Result<Vec<LabelMap>> {
        let (frames, _) = batch_tensors::<T>(batch)?;
        let (h, w) = (frames.dim(2), frames.dim(3));
        let seq_len = batch[0].len();
        let mut tape = Tape::new();
        let x = tape.constant(frames);
        let logits = self.forward(&mut tape, x, seq_len, ForwardOptions::eval())?;
        argmax_labels(tape.value(logits))?.into_iter().map(|d| LabelMap::new(h, w, d)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seq_len: usize,
    pub interval: usize,
    /// Sequences per inference batch.
    pub batch_size: usize,
    pub classes: usize,
    pub corruption: Option<Corruption>,
    /// 1-based context frames to corrupt.
    pub corrupt_frames: Vec<usize>,
    pub noise_params: NoiseParams,
    pub seed: u64,
    pub keep_predictions: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seq_len: 4,
            interval: 1,
            batch_size: 16,
            classes: 4,
            corruption: None,
            corrupt_frames: vec![1, 3],
            noise_params: NoiseParams::default(),
            seed: 0,
            keep_predictions: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub clip_id: usize,
    pub target_index: usize,
    pub predicted: LabelMap,
    pub truth: LabelMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub targets: usize,
    pub clean_cm: ConfusionMatrix,
    pub clean: MiouReport,
    pub corrupted_cm: Option<ConfusionMatrix>,
    pub corrupted: Option<MiouReport>,
    /// `clean.mean - corrupted.mean`.
    pub degradation: Option<f64>,
    pub predictions: Vec<Prediction>,
}

/// Scores every validation target with full history, in clip then frame order.
pub fn evaluate<S: Segmenter + ?Sized>(seg: &mut S, clips: &[VideoClip], cfg: &EvalConfig) -> Result<EvalReport> {
    let pairs = target_pairs(clips, cfg.interval, cfg.seq_len);
    if pairs.is_empty() {
        return Err(Error::Data(format!(
            "empty validation set: no clip has {} frames of history",
            (cfg.seq_len.max(1) - 1) * cfg.interval + 1
        )));
    }
    let mut clean_cm = ConfusionMatrix::new(cfg.classes);
    let mut corrupted_cm = cfg.corruption.map(|_| ConfusionMatrix::new(cfg.classes));
    let mut predictions = Vec::new();
    for chunk in pairs.chunks(cfg.batch_size.max(1)) {
        let samples = chunk
            .iter()
            .map(|&(c, t)| sample_sequence(&clips[c], t, cfg.interval, cfg.seq_len))
            .collect::<Result<Vec<_>>>()?;
        let preds = seg.segment(&samples)?;
        for (s, p) in samples.iter().zip(&preds) {
            clean_cm.update(p, &s.target_label)?;
        }
        if cfg.keep_predictions {
            predictions.extend(samples.iter().zip(preds).map(|(s, p)| Prediction {
                clip_id: s.clip_id,
                target_index: s.target_index,
                predicted: p,
                truth: s.target_label.clone(),
            }));
        }
        if let (Some(kind), Some(cm)) = (cfg.corruption, corrupted_cm.as_mut()) {
            let corrupted = samples
                .iter()
                .map(|s| {
                    let mut rng = rng_for(cfg.seed, &[STREAM_CORRUPT, s.clip_id as u64, s.target_index as u64]);
                    corrupt_for_eval(s, &cfg.corrupt_frames, kind, &cfg.noise_params, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            for (s, p) in corrupted.iter().zip(seg.segment(&corrupted)?) {
                cm.update(&p, &s.target_label)?;
            }
        }
    }
    let clean = clean_cm.miou()?;
    let corrupted = corrupted_cm.as_ref().map(ConfusionMatrix::miou).transpose()?;
    let degradation = corrupted.as_ref().map(|c| clean.mean - c.mean);
    Ok(EvalReport { targets: pairs.len(), clean_cm, clean, corrupted_cm, corrupted, degradation, predictions })
}

/// Four decimals, `NA` for `None`; rounding never yields `-0.0000`.
pub fn fmt4(v: Option<f64>) -> String {
    v.map_or_else(
        || "NA".to_string(),
        |v| {
            let s = format!("{v:.4}");
            if s == "-0.0000" { "0.0000".to_string() } else { s }
        },
    )
}

/// `class_id,iou` rows and a final `mean` row. With a corruption the
/// header gains the anti-noise columns, filled on the `mean` row.
pub fn report_csv(report: &EvalReport, cfg: &EvalConfig) -> String {
    let mut out = String::new();
    let extra = cfg.corruption.map(|kind| {
        let frames: Vec<String> = cfg.corrupt_frames.iter().map(ToString::to_string).collect();
        format!(
            ",{},{},{:.4},{},{}",
            kind.name(),
            frames.join(";"),
            report.clean.mean,
            fmt4(report.corrupted.as_ref().map(|c| c.mean)),
            fmt4(report.degradation)
        )
    });
    out.push_str("class_id,iou");
    if extra.is_some() {
        out.push_str(",noise_kind,corrupted_frames,clean_miou,corrupted_miou,degradation");
    }
    out.push('\n');
    let blanks = if extra.is_some() { ",,,,," } else { "" };
    for (k, iou) in report.clean.per_class.iter().enumerate() {
        out.push_str(&format!("{k},{}{blanks}\n", fmt4(*iou)));
    }
    out.push_str(&format!("mean,{:.4}{}\n", report.clean.mean, extra.unwrap_or_default()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(data: Vec<u8>) -> LabelMap {
        let n = data.len();
        LabelMap::new(1, n, data).unwrap()
    }

    #[test]
    fn two_class_arithmetic() {
        let mut cm = ConfusionMatrix::new(2);
        let truth = map([vec![0u8; 100], vec![1u8; 100]].concat());
        let pred = map([vec![0u8; 50], vec![1u8; 150]].concat());
        cm.update(&pred, &truth).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)), (50, 50, 0, 100));
        let r = cm.miou().unwrap();
        assert_eq!(r.per_class[0], Some(0.5));
        assert!((r.per_class[1].unwrap() - 100.0 / 150.0).abs() < 1e-12);
        assert!((r.mean - (0.5 + 100.0 / 150.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ignored_pixels_and_bad_ids() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&map(vec![0, 1]), &map(vec![255, 255])).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(cm.miou().is_err());
        assert!(cm.update(&map(vec![0]), &map(vec![3])).is_err());
        assert!(cm.update(&map(vec![7]), &map(vec![1])).is_err());
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn csv_layout() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&map(vec![0, 1, 1]), &map(vec![0, 1, 0])).unwrap();
        let clean = cm.miou().unwrap();
        let report = EvalReport {
            targets: 1,
            clean_cm: cm.clone(),
            clean: clean.clone(),
            corrupted_cm: None,
            corrupted: None,
            degradation: None,
            predictions: vec![],
        };
        let csv = report_csv(&report, &EvalConfig::default());
        assert_eq!(csv, "class_id,iou\n0,0.5000\n1,0.5000\n2,NA\nmean,0.5000\n");
    }
}
