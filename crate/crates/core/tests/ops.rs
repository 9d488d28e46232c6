use noisy_lstm::ops::conv::{conv2d, conv2d_reference, ConvGeometry};
use noisy_lstm::ops::loss::softmax_channels;
use noisy_lstm::ops::norm::{BatchNormStats, BN_EPSILON, BN_MOMENTUM};
use noisy_lstm::{Mode, Pointwise, Scalar, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn max_rel_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs() / y.as_f64().abs().max(1.0))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
struct ConvCase {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    bias: bool,
    seed: u64,
}

fn conv_case() -> impl Strategy<Value = ConvCase> {
    (1..=2usize, 1..=4usize, 1..=4usize, 1..=9usize, 1..=9usize, 1..=3usize, 1..=2usize, 0..=4usize)
        .prop_flat_map(|(n, cin, cout, h, w, k, stride, padding)| {
            (Just((n, cin, cout, h, w, k, stride, padding)), prop::sample::select(vec![1usize, 2, 4]), any::<bool>(), any::<u64>())
        })
        .prop_filter_map("kernel must fit", |((n, cin, cout, h, w, k, stride, padding), dilation, bias, seed)| {
            let span = dilation * (k - 1) + 1;
            (h + 2 * padding >= span && w + 2 * padding >= span)
                .then_some(ConvCase { n, cin, cout, h, w, k, stride, padding, dilation, bias, seed })
        })
}

fn check_conv<T: Scalar>(c: &ConvCase, tol: f64) -> Result<(), TestCaseError> {
    let mut r = rng(c.seed);
    let x = Tensor::<T>::uniform(&[c.n, c.cin, c.h, c.w], -1.0, 1.0, &mut r);
    let k = Tensor::<T>::uniform(&[c.cout, c.cin, c.k, c.k], -1.0, 1.0, &mut r);
    let b = Tensor::<T>::uniform(&[c.cout], -1.0, 1.0, &mut r);
    let geom = ConvGeometry::new(c.stride, c.padding, c.dilation);
    let bias = c.bias.then_some(&b);
    let fast = conv2d(&x, &k, bias, geom).unwrap();
    let slow = conv2d_reference(&x, &k, bias, geom).unwrap();
    let err = max_rel_diff(&fast, &slow);
    prop_assert!(err <= tol, "{c:?}: relative error {err}");
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fast_conv_matches_nested_loops(c in conv_case()) {
        check_conv::<f64>(&c, 1e-12)?;
        check_conv::<f32>(&c, 1e-5)?;
    }

    #[test]
    fn softmax_columns_sum_to_one(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let logits = Tensor::<f64>::uniform(&[2, 5, 3, 4], -scale, scale, &mut rng(seed));
        let p = softmax_channels(&logits).unwrap();
        for n in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    let s: f64 = (0..5).map(|c| p.at4(n, c, y, x)).sum();
                    prop_assert!((s - 1.0).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn bn_train_output_is_standardized(seed in any::<u64>(), shift in -5.0f64..5.0, spread in 0.5f64..4.0) {
        let x = Tensor::<f64>::uniform(&[3, 2, 4, 5], shift - spread, shift + spread, &mut rng(seed));
        let y = bn_train(&x, &[1.0, 1.0], &[0.0, 0.0]).0;
        for c in 0..2 {
            let vals = channel(&y, c);
            let (m, v) = two_pass(&vals);
            prop_assert!(m.abs() < 1e-5);
            prop_assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn saturating_activations_stay_in_range(x in -15.0f64..15.0, big in -1e6f64..1e6) {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::new(vec![2], vec![x, big]).unwrap());
        let s = tape.sigmoid(v).unwrap();
        let t = tape.tanh(v).unwrap();
        let (s, t) = (tape.value(s).data().to_vec(), tape.value(t).data().to_vec());
        prop_assert!(s[0] > 0.0 && s[0] < 1.0);
        prop_assert!(t[0] > -1.0 && t[0] < 1.0);
        prop_assert!((0.0..=1.0).contains(&s[1]));
        prop_assert!((-1.0..=1.0).contains(&t[1]));
    }
}

fn channel(t: &Tensor<f64>, c: usize) -> Vec<f64> {
    let s = t.shape();
    let mut out = Vec::new();
    for n in 0..s[0] {
        for y in 0..s[2] {
            for x in 0..s[3] {
                out.push(t.at4(n, c, y, x));
            }
        }
    }
    out
}

fn two_pass(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var)
}

fn bn_train(x: &Tensor<f64>, gamma: &[f64], beta: &[f64]) -> (Tensor<f64>, BatchNormStats<f64>) {
    let c = gamma.len();
    let mut stats = BatchNormStats::new(c);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::new(vec![c], gamma.to_vec()).unwrap());
    let b = tape.constant(Tensor::new(vec![c], beta.to_vec()).unwrap());
    let y = tape.batch_norm(xv, g, b, &mut stats, Mode::Train).unwrap();
    (tape.value(y).clone(), stats)
}

#[test]
fn batch_norm_matches_two_pass_oracle() {
    let x = Tensor::<f64>::uniform(&[4, 2, 5, 5], -2.0, 3.0, &mut rng(7));
    let gamma = [1.3, -0.4];
    let beta = [0.2, 0.9];
    let (y, stats) = bn_train(&x, &gamma, &beta);
    for c in 0..2 {
        let vals = channel(&x, c);
        let (m, var) = two_pass(&vals);
        let expected: Vec<f64> = vals.iter().map(|v| (v - m) / (var + BN_EPSILON).sqrt() * gamma[c] + beta[c]).collect();
        for (a, e) in channel(&y, c).iter().zip(&expected) {
            assert!((a - e).abs() <= 1e-5 * e.abs().max(1.0), "{a} vs {e}");
        }
        let unbiased = var * vals.len() as f64 / (vals.len() - 1) as f64;
        assert!((stats.mean.data()[c] - BN_MOMENTUM * m).abs() < 1e-12);
        assert!((stats.var.data()[c] - ((1.0 - BN_MOMENTUM) + BN_MOMENTUM * unbiased)).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_constant_channel_becomes_beta() {
    let x = Tensor::<f64>::full(&[2, 1, 3, 3], 4.5);
    let (y, _) = bn_train(&x, &[1.0], &[0.7]);
    assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
}

#[test]
fn batch_norm_rejects_single_value_batches() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let g = tape.constant(Tensor::ones(&[1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(tape.batch_norm(x, g, b, &mut BatchNormStats::new(1), Mode::Train).is_err());
}

#[test]
fn avg_pool_of_ramp_equals_window_means() {
    let ramp = Tensor::<f64>::from_fn(&[1, 1, 6, 6], |i| i as f64);
    let mut tape = Tape::new();
    let x = tape.constant(ramp.clone());
    let p = tape.avg_pool(x, 2, 2).unwrap();
    let out = tape.value(p);
    for oy in 0..2 {
        for ox in 0..2 {
            let mut sum = 0.0;
            for y in 3 * oy..3 * oy + 3 {
                for x in 3 * ox..3 * ox + 3 {
                    sum += ramp.at4(0, 0, y, x);
                }
            }
            assert_eq!(out.at4(0, 0, oy, ox), sum / 9.0);
        }
    }
    let flat = tape.constant(Tensor::full(&[1, 1, 4, 4], 3.0));
    let one = tape.avg_pool(flat, 1, 1).unwrap();
    assert_eq!(tape.value(one).data(), &[3.0]);
}

#[test]
fn bilinear_upsample_keeps_constants() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 2, 3, 5], -1.25));
    let y = tape.upsample(x, 7, 11).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == -1.25));
    assert!(tape.upsample(x, 0, 4).is_err());
}

#[test]
fn softmax_ce_matches_per_pixel_sum() {
    let logits = Tensor::<f64>::uniform(&[1, 3, 2, 2], -3.0, 3.0, &mut rng(3));
    let labels = [2u8, 0, 1, 2];
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.softmax_ce_loss(l, &labels, Some(255)).unwrap();
    let mut expected = 0.0;
    for (p, &label) in labels.iter().enumerate() {
        let (y, x) = (p / 2, p % 2);
        let z: f64 = (0..3).map(|c| logits.at4(0, c, y, x).exp()).sum();
        expected += -(logits.at4(0, label as usize, y, x).exp() / z).ln();
    }
    expected /= 4.0;
    assert!((tape.value(loss).item().unwrap() - expected).abs() < 1e-6);
}

#[test]
fn softmax_ce_limits() {
    let mut tape = Tape::<f64>::new();
    let uniform = tape.constant(Tensor::zeros(&[1, 4, 2, 2]));
    let l = tape.softmax_ce_loss(uniform, &[0, 1, 2, 3], None).unwrap();
    assert!((tape.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);
    let confident = tape.constant(Tensor::from_fn(&[1, 2, 1, 1], |c| if c == 1 { 20.0 } else { 0.0 }));
    let l = tape.softmax_ce_loss(confident, &[1], None).unwrap();
    assert!(tape.value(l).item().unwrap() < 1e-3);
    let any = tape.constant(Tensor::zeros(&[1, 2, 1, 2]));
    assert!(tape.softmax_ce_loss(any, &[255, 255], Some(255)).is_err());
}

#[test]
fn tanh_gradient_matches_central_difference() {
    let x0 = 0.3f64;
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(x0), true);
    let y = tape.pointwise(x, Pointwise::Tanh, None).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    let analytic = tape.grad(x).unwrap().item().unwrap();
    let eps = 1e-5;
    let numeric = ((x0 + eps).tanh() - (x0 - eps).tanh()) / (2.0 * eps);
    assert!((analytic - numeric).abs() / numeric.abs() < 1e-6);
}
