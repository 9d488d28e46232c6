//! Central-difference verification of tape gradients.
//!
//! For each checked parameter element the harness compares the tape
//! gradient `a` with `n = (f(θ+ε) − f(θ−ε)) / 2ε` using the relative error
//! `|a − n| / max(|a|, |n|, floor)`. The floor keeps round-off in
//! near-zero gradients from reading as a failure.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Fault, Tape, Var};
use crate::error::Result;
use crate::params::Parameterized;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Parameters with more elements are checked on a random subsample of this size.
    pub max_elements: usize,
    pub floor: f64,
    pub seed: u64,
    /// Corrupts a backward rule on the analytic pass (mutation control).
    pub fault: Option<Fault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { epsilon: 1e-5, tolerance: 1e-6, max_elements: 64, floor: 1e-3, seed: 0, fault: None }
    }
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamReport> {
        self.params.iter().filter(move |p| p.max_rel_error >= self.tolerance)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks every parameter of `model` against central differences of
/// `loss_fn`, which must register parameters with [`Tape::param`] under
/// the names `model` reports.
pub fn grad_check<M, F>(model: &mut M, mut loss_fn: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    M: Parameterized<f64>,
    F: FnMut(&mut M, &mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::with_fault(cfg.fault);
    let loss = loss_fn(model, &mut tape)?;
    tape.backward(loss)?;
    let analytic: Vec<(String, Vec<f64>)> = model
        .params()
        .into_iter()
        .map(|(name, t)| {
            let g = tape
                .param_var(&name)
                .and_then(|v| tape.grad(v))
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            (name, g)
        })
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut eval = |model: &mut M| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = loss_fn(model, &mut tape)?;
        tape.value(loss).item()
    };

    let mut reports = Vec::with_capacity(analytic.len());
    for (p, (name, grad)) in analytic.iter().enumerate() {
        let numel = grad.len();
        let picks: Vec<usize> = if numel <= cfg.max_elements {
            (0..numel).collect()
        } else {
            let mut v = index::sample(&mut rng, numel, cfg.max_elements).into_vec();
            v.sort_unstable();
            v
        };
        let mut report = ParamReport {
            name: name.clone(),
            checked: picks.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &picks {
            let original = model.params_mut()[p].1.data()[i];
            model.params_mut()[p].1.data_mut()[i] = original + cfg.epsilon;
            let plus = eval(model);
            model.params_mut()[p].1.data_mut()[i] = original - cfg.epsilon;
            let minus = eval(model);
            model.params_mut()[p].1.data_mut()[i] = original;
            let numeric = (plus? - minus?) / (2.0 * cfg.epsilon);
            let err = relative_error(grad[i], numeric, cfg.floor);
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst_index = i;
                report.analytic = grad[i];
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport { tolerance: cfg.tolerance, params: reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamList;
    use crate::tensor::Tensor;

    fn linear_model() -> (ParamList<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let x = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        (ParamList(vec![("w".into(), w)]), x)
    }

    #[test]
    fn linear_model_is_exact() {
        let (mut model, x) = linear_model();
        let report = grad_check(
            &mut model,
            |m, tape| {
                let w = tape.param("w", m.get("w").unwrap(), true);
                let x = tape.constant(x.clone());
                let p = tape.mul(w, x)?;
                tape.sum(p)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-10, "{report:?}");
    }

    #[test]
    fn negated_tanh_rule_is_flagged() {
        let (mut model, x) = linear_model();
        let cfg = GradCheckConfig { fault: Some(Fault::NegateTanhBackward), ..Default::default() };
        let report = grad_check(
            &mut model,
            |m, tape| {
                let w = tape.param("w", m.get("w").unwrap(), true);
                let x = tape.constant(x.clone());
                let p = tape.mul(w, x)?;
                let t = tape.tanh(p)?;
                tape.sum(t)
            },
            &cfg,
        )
        .unwrap();
        assert!(report.max_rel_error() > 0.5);
        assert!(!report.passed());
    }
}
