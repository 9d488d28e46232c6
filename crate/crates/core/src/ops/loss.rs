//! Pixelwise softmax cross-entropy.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Label value excluded from the loss and from metrics.
pub const IGNORE_INDEX: u8 = 255;

pub(crate) struct CeSaved<T> {
    pub probs: Vec<T>,
    pub count: usize,
}

/// Mean of `-log softmax(logits)[label]` over non-ignored pixels.
///
/// `labels` holds one class id per `(n, y, x)` in row-major order.
pub(crate) fn forward<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u8],
    ignore: Option<u8>,
) -> Result<(T, CeSaved<T>)> {
    logits.expect_rank(4, "softmax_ce_loss")?;
    let (n, c, plane) = (logits.dim(0), logits.dim(1), logits.dim(2) * logits.dim(3));
    if labels.len() != n * plane {
        return Err(Error::shape(format!(
            "softmax_ce_loss: {} labels for {} pixels",
            labels.len(),
            n * plane
        )));
    }
    let x = logits.data();
    let mut probs = vec![T::zero(); x.len()];
    let mut total = T::zero();
    let mut count = 0usize;
    for b in 0..n {
        for p in 0..plane {
            let at = |k: usize| (b * c + k) * plane + p;
            let max = (0..c).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..c {
                let e = (x[at(k)] - max).exp();
                probs[at(k)] = e;
                z += e;
            }
            for k in 0..c {
                probs[at(k)] /= z;
            }
            let label = labels[b * plane + p];
            if Some(label) == ignore {
                continue;
            }
            if label as usize >= c {
                return Err(Error::invalid(format!("label {label} outside [0, {c})")));
            }
            total += z.ln() - (x[at(label as usize)] - max);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("softmax_ce_loss: every pixel is ignored"));
    }
    Ok((total / T::of(count as f64), CeSaved { probs, count }))
}

pub(crate) fn backward<T: Scalar>(
    shape: &[usize],
    labels: &[u8],
    ignore: Option<u8>,
    saved: &CeSaved<T>,
    upstream: T,
) -> Vec<T> {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let scale = upstream / T::of(saved.count as f64);
    let mut dx = vec![T::zero(); saved.probs.len()];
    for b in 0..n {
        for p in 0..plane {
            let label = labels[b * plane + p];
            if Some(label) == ignore {
                continue;
            }
            for k in 0..c {
                let at = (b * c + k) * plane + p;
                let target = if k == label as usize { T::one() } else { T::zero() };
                dx[at] = (saved.probs[at] - target) * scale;
            }
        }
    }
    dx
}

/// Channelwise softmax of `[N,C,H,W]` logits, stabilized by max-subtraction.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    logits.expect_rank(4, "softmax")?;
    let (n, h, w) = (logits.dim(0), logits.dim(2), logits.dim(3));
    let labels = vec![0u8; n * h * w];
    let (_, saved) = forward(logits, &labels, None)?;
    Tensor::new(logits.shape().to_vec(), saved.probs)
}
