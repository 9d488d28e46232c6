//! Adam with bias correction, the step learning-rate schedule and
//! global-norm gradient clipping.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    /// First and second moments by parameter name, created on first use.
    pub moments: HashMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self { beta1: BETA1, beta2: BETA2, epsilon: ADAM_EPSILON, step: 0, moments: HashMap::new() }
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Moment tensors as checkpoint records `m/<name>` and `v/<name>`, sorted by name.
    pub fn records(&self) -> Vec<(String, &Tensor<T>)> {
        let mut names: Vec<&String> = self.moments.keys().collect();
        names.sort();
        let mut out = Vec::with_capacity(2 * names.len());
        for n in names {
            let (m, v) = &self.moments[n];
            out.push((format!("m/{n}"), m));
            out.push((format!("v/{n}"), v));
        }
        out
    }

    pub fn from_records(records: Vec<(String, Tensor<T>)>, step: u64) -> Result<Self> {
        let mut first = HashMap::new();
        let mut second = HashMap::new();
        for (name, t) in records {
            if let Some(n) = name.strip_prefix("m/") {
                first.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("v/") {
                second.insert(n.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected optimizer record `{name}`")));
            }
        }
        let mut moments = HashMap::new();
        for (n, m) in first {
            let v = second
                .remove(&n)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for `{n}` lacks its second moment")))?;
            if m.shape() != v.shape() {
                return Err(Error::Checkpoint(format!("optimizer moments for `{n}` disagree in shape")));
            }
            moments.insert(n, (m, v));
        }
        if let Some(n) = second.keys().next() {
            return Err(Error::Checkpoint(format!("optimizer state for `{n}` lacks its first moment")));
        }
        Ok(Self { step, moments, ..Self::default() })
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are left
/// alone. Nothing is modified if any gradient is non-finite.
pub fn adam_step<T: Scalar>(
    params: Vec<(String, &mut Tensor<T>)>,
    grads: &[(String, Tensor<T>)],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    let grads: HashMap<&str, &Tensor<T>> = grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
    for (name, p) in &params {
        if let Some(g) = grads.get(name.as_str()) {
            if g.shape() != p.shape() {
                return Err(Error::shape(format!(
                    "gradient for `{name}` has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteParamGradient(name.clone()));
            }
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - state.beta1), T::of(1.0 - state.beta2));
    let c1 = T::of(1.0 - state.beta1.powf(t));
    let c2 = T::of(1.0 - state.beta2.powf(t));
    let (lr, eps) = (T::of(lr), T::of(state.epsilon));
    for (name, p) in params {
        let Some(g) = grads.get(name.as_str()) else { continue };
        let (m, v) = state
            .moments
            .entry(name)
            .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// `base_lr` for the first `ceil(total / 2)` epochs, `base_lr / drop` after.
pub fn lr_schedule(epoch: usize, total_epochs: usize, base_lr: f64, drop: f64) -> f64 {
    if epoch < total_epochs.div_ceil(2) {
        base_lr
    } else {
        base_lr / drop
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [(String, Tensor<T>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_has_one_drop_at_ceil_half() {
        assert_eq!(lr_schedule(0, 40, 1e-4, 10.0), 1e-4);
        assert_eq!(lr_schedule(19, 40, 1e-4, 10.0), 1e-4);
        assert_eq!(lr_schedule(20, 40, 1e-4, 10.0), 1e-5);
        assert_eq!(lr_schedule(2, 5, 1.0, 10.0), 1.0);
        assert_eq!(lr_schedule(3, 5, 1.0, 10.0), 0.1);
    }

    #[test]
    fn non_finite_gradient_is_refused_by_name() {
        let mut w = Tensor::<f64>::zeros(&[2]);
        let grads = vec![("w".to_string(), Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap())];
        let mut st = AdamState::new();
        let err = adam_step(vec![("w".into(), &mut w)], &grads, &mut st, 0.1).unwrap_err();
        assert!(err.to_string().contains("`w`") || err.to_string().contains("w"), "{err}");
        assert_eq!(st.step, 0);
        assert_eq!(w.data(), &[0.0, 0.0]);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![("a".to_string(), Tensor::<f64>::new(vec![2], vec![3.0, 4.0]).unwrap())];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].1.data()[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn records_round_trip() {
        let mut w = Tensor::<f32>::ones(&[3]);
        let grads = vec![("w".to_string(), Tensor::full(&[3], 0.5))];
        let mut st = AdamState::new();
        adam_step(vec![("w".into(), &mut w)], &grads, &mut st, 0.01).unwrap();
        let recs = st.records().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(AdamState::from_records(recs, st.step).unwrap(), st);
    }
}
