//! Per-channel batch normalization over `[N,C,H,W]`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

/// Running mean and (unbiased) variance tracked across training steps.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: Tensor::zeros(&[channels]), var: Tensor::ones(&[channels]) }
    }
}

/// Values saved by the forward pass for the backward pass.
pub(crate) struct BnSaved<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

fn check<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    x.expect_rank(4, "batch_norm")?;
    let (n, c, plane) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
    gamma.expect_shape(&[c])?;
    beta.expect_shape(&[c])?;
    Ok((n, c, plane))
}

/// Train-mode normalization with batch statistics; updates `stats` in place.
pub(crate) fn forward_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut BatchNormStats<T>,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let (n, c, plane) = check(x, gamma, beta)?;
    stats.mean.expect_shape(&[c])?;
    stats.var.expect_shape(&[c])?;
    let m = n * plane;
    if m < 2 {
        return Err(Error::invalid("batch_norm in train mode needs at least two values per channel"));
    }
    let xd = x.data();
    let mut normalized = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    let mut inv_std = vec![T::zero(); c];
    let count = T::of(m as f64);
    let momentum = T::of(BN_MOMENTUM);
    for ch in 0..c {
        let idx = |b: usize| (b * c + ch) * plane;
        let mut sum = T::zero();
        for b in 0..n {
            sum += xd[idx(b)..idx(b) + plane].iter().copied().sum::<T>();
        }
        let mean = sum / count;
        let mut sq = T::zero();
        for b in 0..n {
            sq += xd[idx(b)..idx(b) + plane].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
        }
        let var = sq / count;
        let inv = T::one() / (var + T::of(BN_EPSILON)).sqrt();
        inv_std[ch] = inv;
        let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
        for b in 0..n {
            for i in idx(b)..idx(b) + plane {
                let xh = (xd[i] - mean) * inv;
                normalized[i] = xh;
                out[i] = g * xh + bt;
            }
        }
        let unbiased = sq / T::of((m - 1) as f64);
        let rm = &mut stats.mean.data_mut()[ch];
        *rm = (T::one() - momentum) * *rm + momentum * mean;
        let rv = &mut stats.var.data_mut()[ch];
        *rv = (T::one() - momentum) * *rv + momentum * unbiased;
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        BnSaved { normalized, inv_std, train: true },
    ))
}

/// Eval-mode normalization with running statistics.
pub(crate) fn forward_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &BatchNormStats<T>,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let (n, c, plane) = check(x, gamma, beta)?;
    let xd = x.data();
    let mut normalized = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    let inv_std: Vec<T> = stats
        .var
        .data()
        .iter()
        .map(|&v| T::one() / (v + T::of(BN_EPSILON)).sqrt())
        .collect();
    for b in 0..n {
        for ch in 0..c {
            let (mean, inv) = (stats.mean.data()[ch], inv_std[ch]);
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            let start = (b * c + ch) * plane;
            for i in start..start + plane {
                let xh = (xd[i] - mean) * inv;
                normalized[i] = xh;
                out[i] = g * xh + bt;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        BnSaved { normalized, inv_std, train: false },
    ))
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub(crate) fn backward<T: Scalar>(
    shape: &[usize],
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = T::of((n * plane) as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let idx = |b: usize| (b * c + ch) * plane;
        let (mut sum_dy, mut sum_dy_xh) = (T::zero(), T::zero());
        for b in 0..n {
            for i in idx(b)..idx(b) + plane {
                sum_dy += dy[i];
                sum_dy_xh += dy[i] * saved.normalized[i];
            }
        }
        dgamma[ch] = sum_dy_xh;
        dbeta[ch] = sum_dy;
        let g = gamma.data()[ch];
        let inv = saved.inv_std[ch];
        for b in 0..n {
            for i in idx(b)..idx(b) + plane {
                dx[i] = if saved.train {
                    g * inv / m * (m * dy[i] - sum_dy - saved.normalized[i] * sum_dy_xh)
                } else {
                    g * inv * dy[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
