//! Ready-made gradient-check instances: every differentiable op, the
//! ConvLSTM cell, and a minimal end-to-end network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape, Var};
use crate::convlstm::{CellInit, ConvLstmCell};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::ops::{BatchNormStats, ConvGeometry, IGNORE_INDEX};
use crate::params::ParamList;
use crate::segnet::{ForwardOptions, ModelConfig, NoisyLstmNet, Phase};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Op,
    Cell,
    Full,
}

/// Named reports, one per checked instance.
pub type SuiteReport = Vec<(String, GradCheckReport)>;

pub fn suite_passed(reports: &SuiteReport) -> bool {
    reports.iter().all(|(_, r)| r.passed())
}

pub fn run_scope(scope: Scope, cfg: &GradCheckConfig) -> Result<SuiteReport> {
    match scope {
        Scope::Op => op_suite(cfg),
        Scope::Cell => Ok(vec![("convlstm".into(), cell_check(cfg)?)]),
        Scope::Full => Ok(vec![("network".into(), full_check(cfg)?)]),
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values in `±[0.1, 1]`, away from the ReLU kink.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(y ⊙ r)` for a fixed random `r`, so every output element matters.
fn project(tape: &mut Tape<f64>, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let r = tape.constant(uniform(tape.value(y).shape(), rng));
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

type Case = (&'static str, ParamList<f64>, Box<dyn Fn(&ParamList<f64>, &mut Tape<f64>) -> Result<Var>>);

fn op_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut out: Vec<Case> = Vec::new();
    let p = |m: &ParamList<f64>, tape: &mut Tape<f64>, n: &str| tape.param(n, m.get(n).unwrap(), true);

    for (name, geom) in [
        ("conv2d", ConvGeometry::SAME_3X3),
        ("conv2d_strided", ConvGeometry::new(2, 1, 1)),
        ("conv2d_dilated", ConvGeometry::new(1, 2, 2)),
    ] {
        let params = ParamList(vec![
            ("x".into(), uniform(&[2, 3, 6, 6], &mut rng)),
            ("k".into(), uniform(&[4, 3, 3, 3], &mut rng)),
            ("b".into(), uniform(&[4], &mut rng)),
        ]);
        let seed = rng.gen();
        out.push((
            name,
            params,
            Box::new(move |m, tape| {
                let (x, k, b) = (p(m, tape, "x"), p(m, tape, "k"), p(m, tape, "b"));
                let y = tape.conv2d(x, k, Some(b), geom)?;
                project(tape, y, &mut ChaCha8Rng::seed_from_u64(seed))
            }),
        ));
    }

    let params = ParamList(vec![
        ("x".into(), uniform(&[3, 2, 3, 3], &mut rng)),
        ("gamma".into(), uniform(&[2], &mut rng)),
        ("beta".into(), uniform(&[2], &mut rng)),
    ]);
    let seed = rng.gen();
    out.push((
        "batch_norm",
        params,
        Box::new(move |m, tape| {
            let (x, g, b) = (p(m, tape, "x"), p(m, tape, "gamma"), p(m, tape, "beta"));
            let mut stats = BatchNormStats::new(2);
            let y = tape.batch_norm(x, g, b, &mut stats, Mode::Train)?;
            project(tape, y, &mut ChaCha8Rng::seed_from_u64(seed))
        }),
    ));

    let params = ParamList(vec![("x".into(), off_zero(&[2, 3, 4], &mut rng)), ("y".into(), uniform(&[2, 3, 4], &mut rng))]);
    let seed = rng.gen();
    out.push((
        "pointwise",
        params,
        Box::new(move |m, tape| {
            let (x, y) = (p(m, tape, "x"), p(m, tape, "y"));
            let a = tape.sigmoid(x)?;
            let b = tape.tanh(y)?;
            let c = tape.relu(x)?;
            let ab = tape.mul(a, b)?;
            let d = tape.sub(ab, c)?;
            let e = tape.add(d, y)?;
            let f = tape.scale(e, 0.7)?;
            project(tape, f, &mut ChaCha8Rng::seed_from_u64(seed))
        }),
    ));

    let params = ParamList(vec![("x".into(), uniform(&[2, 2, 5, 7], &mut rng))]);
    let seed = rng.gen();
    out.push((
        "resample",
        params,
        Box::new(move |m, tape| {
            let x = p(m, tape, "x");
            let pooled = tape.avg_pool(x, 3, 3)?;
            let up = tape.upsample(pooled, 5, 7)?;
            let big = tape.upsample(x, 9, 11)?;
            let back = tape.avg_pool(big, 5, 7)?;
            let y = tape.concat(&[up, back], 1)?;
            project(tape, y, &mut ChaCha8Rng::seed_from_u64(seed))
        }),
    ));

    let params = ParamList(vec![("x".into(), uniform(&[3, 4, 2, 2], &mut rng)), ("y".into(), uniform(&[1, 2, 2, 2], &mut rng))]);
    let seed = rng.gen();
    out.push((
        "indexing",
        params,
        Box::new(move |m, tape| {
            let (x, y) = (p(m, tape, "x"), p(m, tape, "y"));
            let s = tape.slice(x, 1, 1, 2)?;
            let sel = tape.select_batch(s, &[2, 0, 2])?;
            let rep = tape.repeat_batch(y, 3)?;
            let rep = tape.reshape(rep, &[3, 2, 2, 2])?;
            let z = tape.concat(&[sel, rep], 1)?;
            project(tape, z, &mut ChaCha8Rng::seed_from_u64(seed))
        }),
    ));

    let labels: Vec<u8> = (0..2 * 3 * 3).map(|i| if i % 7 == 3 { IGNORE_INDEX } else { rng.gen_range(0..4) }).collect();
    let params = ParamList(vec![("logits".into(), Tensor::uniform(&[2, 4, 3, 3], -2.0, 2.0, &mut rng))]);
    out.push((
        "softmax_ce",
        params,
        Box::new(move |m, tape| {
            let x = p(m, tape, "logits");
            tape.softmax_ce_loss(x, &labels, Some(IGNORE_INDEX))
        }),
    ));
    out
}

pub fn op_suite(cfg: &GradCheckConfig) -> Result<SuiteReport> {
    op_cases()
        .into_iter()
        .map(|(name, mut params, f)| Ok((name.to_string(), grad_check(&mut params, |m, tape| f(m, tape), cfg)?)))
        .collect()
}

/// A 2-in, 3-hidden cell on 4x4 maps unrolled over three steps.
pub fn cell_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut cell = ConvLstmCell::<f64>::new(2, 3, 4, 4, CellInit::default(), &mut rng);
    for u in &mut cell.u {
        *u = uniform(u.shape(), &mut rng);
    }
    for b in &mut cell.b {
        *b = uniform(b.shape(), &mut rng).map(|v| 0.5 * v);
    }
    let inputs: Vec<Tensor<f64>> = (0..3).map(|_| uniform(&[2, 2, 4, 4], &mut rng)).collect();
    let weights = uniform(&[2, 3, 4, 4], &mut rng);
    grad_check(
        &mut cell,
        |cell, tape| {
            let zs: Vec<Var> = inputs.iter().map(|z| tape.constant(z.clone())).collect();
            let h = cell.encode(tape, &zs, true)?;
            let w = tape.constant(weights.clone());
            let p = tape.mul(h, w)?;
            tape.sum(p)
        },
        cfg,
    )
}

/// Configuration of the smallest network that still exercises every block.
pub fn toy_model() -> ModelConfig {
    ModelConfig { channels: vec![3, 4, 4, 4, 4], bins: vec![1, 2, 4], crop: [16, 16], classes: 3, forget_bias: 1.0 }
}

/// One sequence of two 16x16 frames through the phase-2 network.
pub fn full_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut net = NoisyLstmNet::<f64>::new(toy_model(), &mut rng)?;
    net.start_phase_two(&mut rng);
    for u in &mut net.cell.u {
        *u = uniform(u.shape(), &mut rng).map(|v| 0.5 * v);
    }
    let frames = Tensor::uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng);
    let labels: Vec<u8> =
        (0..16 * 16).map(|i| if i % 11 == 5 { IGNORE_INDEX } else { rng.gen_range(0..3) }).collect();
    debug_assert_eq!(net.phase, Phase::Phase2);
    grad_check(
        &mut net,
        |net, tape| {
            let x = tape.constant(frames.clone());
            let logits = net.forward(tape, x, 2, ForwardOptions::train())?;
            tape.softmax_ce_loss(logits, &labels, Some(IGNORE_INDEX))
        },
        cfg,
    )
}
