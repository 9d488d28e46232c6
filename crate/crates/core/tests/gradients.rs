use noisy_lstm::convlstm::{CellInit, CellState, ConvLstmCell};
use noisy_lstm::grad_suites::{cell_check, full_check, op_suite, suite_passed};
use noisy_lstm::gradcheck::{grad_check, GradCheckConfig};
use noisy_lstm::ops::{BatchNormStats, ConvGeometry, IGNORE_INDEX};
use noisy_lstm::{Fault, Mode, ParamList, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> noisy_lstm::Result<Var> {
    let r = tape.constant(uniform(tape.value(y).shape(), &mut ChaCha8Rng::seed_from_u64(seed)));
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

fn param(m: &ParamList<f64>, tape: &mut Tape<f64>, name: &str) -> Var {
    tape.param(name, m.get(name).unwrap(), true)
}

fn assert_passes(what: &str, mut params: ParamList<f64>, mut f: impl FnMut(&ParamList<f64>, &mut Tape<f64>) -> noisy_lstm::Result<Var>) {
    let report = grad_check(&mut params, |m, tape| f(m, tape), &GradCheckConfig::default()).unwrap();
    assert!(report.passed(), "{what}: {:?}", report.failures().collect::<Vec<_>>());
}

#[test]
fn every_op_passes_on_three_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for round in 0..3 {
        let n = rng.gen_range(1..=2);
        let cin = rng.gen_range(1..=3);
        let cout = rng.gen_range(1..=3);
        let h = rng.gen_range(4..=7);
        let w = rng.gen_range(4..=7);
        let seed: u64 = rng.gen();

        let dilation = [1, 2][round % 2];
        let geom = ConvGeometry::new(1 + round % 2, dilation, dilation);
        let params = ParamList(vec![
            ("x".into(), uniform(&[n, cin, h, w], &mut rng)),
            ("k".into(), uniform(&[cout, cin, 3, 3], &mut rng)),
            ("b".into(), uniform(&[cout], &mut rng)),
        ]);
        assert_passes("conv2d", params, |m, tape| {
            let (x, k, b) = (param(m, tape, "x"), param(m, tape, "k"), param(m, tape, "b"));
            let y = tape.conv2d(x, k, Some(b), geom)?;
            project(tape, y, seed)
        });

        let params = ParamList(vec![
            ("x".into(), uniform(&[n + 1, cin, h, w], &mut rng)),
            ("gamma".into(), uniform(&[cin], &mut rng)),
            ("beta".into(), uniform(&[cin], &mut rng)),
        ]);
        assert_passes("batch_norm", params, |m, tape| {
            let (x, g, b) = (param(m, tape, "x"), param(m, tape, "gamma"), param(m, tape, "beta"));
            let y = tape.batch_norm(x, g, b, &mut BatchNormStats::new(cin), Mode::Train)?;
            project(tape, y, seed)
        });

        let params = ParamList(vec![("x".into(), uniform(&[n, cin, h, w], &mut rng)), ("y".into(), uniform(&[n, cin, h, w], &mut rng))]);
        assert_passes("pointwise", params, |m, tape| {
            let (x, y) = (param(m, tape, "x"), param(m, tape, "y"));
            let a = tape.sigmoid(x)?;
            let b = tape.tanh(y)?;
            let c = tape.relu(y)?;
            let d = tape.mul(a, b)?;
            let e = tape.add(d, c)?;
            project(tape, e, seed)
        });

        let (ph, pw) = (rng.gen_range(1..=h), rng.gen_range(1..=w));
        let params = ParamList(vec![("x".into(), uniform(&[n, cin, h, w], &mut rng))]);
        assert_passes("pool_and_resize", params, |m, tape| {
            let x = param(m, tape, "x");
            let p = tape.avg_pool(x, ph, pw)?;
            let u = tape.upsample(p, h + 3, w + 1)?;
            project(tape, u, seed)
        });

        let classes = cout + 1;
        let labels: Vec<u8> =
            (0..n * h * w).map(|i| if i % 5 == 0 { IGNORE_INDEX } else { rng.gen_range(0..classes as u8) }).collect();
        let params = ParamList(vec![("logits".into(), uniform(&[n, classes, h, w], &mut rng))]);
        assert_passes("softmax_ce", params, |m, tape| {
            let x = param(m, tape, "logits");
            tape.softmax_ce_loss(x, &labels, Some(IGNORE_INDEX))
        });
    }
}

#[test]
fn builtin_suites_pass() {
    let cfg = GradCheckConfig::default();
    let ops = op_suite(&cfg).unwrap();
    assert!(suite_passed(&ops));
    let cell = cell_check(&cfg).unwrap();
    assert!(cell.passed());
    assert_eq!(cell.params.len(), 15);
    let full = full_check(&cfg).unwrap();
    assert!(full.passed(), "{:?}", full.failures().collect::<Vec<_>>());
    assert!(full.params.iter().filter(|p| p.name.starts_with("convlstm.")).count() == 15);
}

#[test]
fn negated_tanh_backward_fails_the_cell_suite() {
    let cfg = GradCheckConfig { fault: Some(Fault::NegateTanhBackward), ..GradCheckConfig::default() };
    let report = cell_check(&cfg).unwrap();
    assert!(!report.passed());
    assert!(report.max_rel_error() > 0.5);
}

#[test]
fn single_step_cell_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cell = ConvLstmCell::<f64>::new(2, 2, 4, 4, CellInit::default(), &mut rng);
    for u in &mut cell.u {
        *u = uniform(u.shape(), &mut rng);
    }
    for b in &mut cell.b {
        *b = uniform(b.shape(), &mut rng);
    }
    let z = uniform(&[1, 2, 4, 4], &mut rng);
    let h0 = uniform(&[1, 2, 4, 4], &mut rng).map(|v| 0.5 * v);
    let c0 = uniform(&[1, 2, 4, 4], &mut rng);
    let report = grad_check(
        &mut cell,
        |cell, tape| {
            let zv = tape.constant(z.clone());
            let state = CellState::new(tape.constant(h0.clone()), tape.constant(c0.clone()));
            let next = cell.step(tape, zv, &state, true)?;
            let hc = tape.add(next.h, next.c)?;
            project(tape, hc, 9)
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert_eq!(report.params.len(), 15);
    assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
}

#[test]
fn temporal_gradient_reaches_the_first_frame() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cell = ConvLstmCell::<f64>::new(3, 4, 5, 5, CellInit::default(), &mut rng);
    let mut tape = Tape::new();
    let zs: Vec<Var> = (0..4).map(|_| tape.leaf(uniform(&[1, 3, 5, 5], &mut rng), true)).collect();
    let h = cell.encode(&mut tape, &zs, false).unwrap();
    let loss = project(&mut tape, h, 1).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(zs[0]).unwrap().max_abs() > 0.0);
}
