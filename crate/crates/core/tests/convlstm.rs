use noisy_lstm::convlstm::{CellInit, CellState, ConvLstmCell};
use noisy_lstm::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `[C][H][W]` planes for one batch element.
type Planes = Vec<Vec<Vec<f64>>>;

fn planes(t: &Tensor<f64>, n: usize) -> Planes {
    let s = t.shape();
    (0..s[1]).map(|c| (0..s[2]).map(|y| (0..s[3]).map(|x| t.at4(n, c, y, x)).collect()).collect()).collect()
}

/// 3x3, stride 1, zero padding 1, written out per output element.
fn conv_same(k: &Tensor<f64>, input: &Planes) -> Planes {
    let (cout, cin) = (k.dim(0), k.dim(1));
    let (h, w) = (input[0].len(), input[0][0].len());
    let mut out = vec![vec![vec![0.0; w]; h]; cout];
    for o in 0..cout {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for i in 0..cin {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (sy, sx) = (y as isize + dy as isize - 1, x as isize + dx as isize - 1);
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                acc += k.data()[((o * cin + i) * 3 + dy) * 3 + dx] * input[i][sy as usize][sx as usize];
                            }
                        }
                    }
                }
                out[o][y][x] = acc;
            }
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// One step of the peephole recurrence on plain nested vectors.
fn scalar_step(cell: &ConvLstmCell<f64>, z: &Planes, h: &Planes, c: &Planes) -> (Planes, Planes) {
    let (ch, hh, ww) = (h.len(), h[0].len(), h[0][0].len());
    let at = |t: &Tensor<f64>, k: usize, y: usize, x: usize| t.data()[(k * hh + y) * ww + x];
    let pre: Vec<Planes> = (0..4)
        .map(|g| {
            let a = conv_same(&cell.w[g], z);
            let b = conv_same(&cell.v[g], h);
            (0..ch)
                .map(|k| (0..hh).map(|y| (0..ww).map(|x| a[k][y][x] + b[k][y][x] + at(&cell.b[g], k, y, x)).collect()).collect())
                .collect()
        })
        .collect();
    let mut h_new = h.clone();
    let mut c_new = c.clone();
    for k in 0..ch {
        for y in 0..hh {
            for x in 0..ww {
                let c_prev = c[k][y][x];
                let i = sigmoid(pre[0][k][y][x] + at(&cell.u[0], k, y, x) * c_prev);
                let f = sigmoid(pre[1][k][y][x] + at(&cell.u[1], k, y, x) * c_prev);
                let g = pre[2][k][y][x].tanh();
                let c_t = f * c_prev + i * g;
                let o = sigmoid(pre[3][k][y][x] + at(&cell.u[2], k, y, x) * c_t);
                c_new[k][y][x] = c_t;
                h_new[k][y][x] = o * c_t.tanh();
            }
        }
    }
    (h_new, c_new)
}

fn random_cell(cz: usize, ch: usize, h: usize, w: usize, scale: f64, rng: &mut ChaCha8Rng) -> ConvLstmCell<f64> {
    let mut cell = ConvLstmCell::<f64>::new(cz, ch, h, w, CellInit::default(), rng);
    for t in cell.w.iter_mut().chain(cell.v.iter_mut()).chain(cell.u.iter_mut()).chain(cell.b.iter_mut()) {
        *t = Tensor::uniform(t.shape(), -scale, scale, rng);
    }
    cell
}

fn run_states(cell: &ConvLstmCell<f64>, zs: &[Tensor<f64>]) -> Vec<(Tensor<f64>, Tensor<f64>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = zs.iter().map(|z| tape.constant(z.clone())).collect();
    let states = cell.encode_states(&mut tape, &vars, false).unwrap();
    states.iter().map(|s| (tape.value(s.h).clone(), tape.value(s.c).clone())).collect()
}

#[test]
fn matches_scalar_reimplementation_over_four_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let cell = random_cell(3, 2, 5, 4, 0.8, &mut rng);
    let zs: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::uniform(&[2, 3, 5, 4], -1.0, 1.0, &mut rng)).collect();
    let states = run_states(&cell, &zs);
    for n in 0..2 {
        let mut h = vec![vec![vec![0.0; 4]; 5]; 2];
        let mut c = h.clone();
        for (t, z) in zs.iter().enumerate() {
            (h, c) = scalar_step(&cell, &planes(z, n), &h, &c);
            let (ht, ct) = (planes(&states[t].0, n), planes(&states[t].1, n));
            for k in 0..2 {
                for y in 0..5 {
                    for x in 0..4 {
                        assert!((ht[k][y][x] - h[k][y][x]).abs() < 1e-6, "h step {t}");
                        assert!((ct[k][y][x] - c[k][y][x]).abs() < 1e-6, "c step {t}");
                    }
                }
            }
        }
    }
}

#[test]
fn zero_cell_gives_zero_state_for_any_input() {
    let cell = ConvLstmCell::<f64>::zeros(3, 4, 6, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let zs: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::uniform(&[2, 3, 6, 6], -100.0, 100.0, &mut rng)).collect();
    let (h, c) = run_states(&cell, &zs).pop().unwrap();
    assert!(h.data().iter().all(|&v| v == 0.0));
    assert!(c.data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_frame_encoding_is_one_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cell = random_cell(2, 3, 4, 4, 1.0, &mut rng);
    let z = Tensor::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let zv = tape.constant(z);
    let g = cell.encode(&mut tape, &[zv], false).unwrap();
    let zero = CellState::zeros(&mut tape, [1, 3, 4, 4]);
    let step = cell.step(&mut tape, zv, &zero, false).unwrap();
    assert_eq!(tape.value(g), tape.value(step.h));
    assert!(cell.encode(&mut tape, &[], false).is_err());
}

#[test]
fn saturated_gates_carry_the_cell_over_many_steps() {
    let mut cell = ConvLstmCell::<f64>::zeros(2, 2, 3, 3);
    cell.b[0] = Tensor::full(&[2, 3, 3], -10.0);
    cell.b[1] = Tensor::full(&[2, 3, 3], 10.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c0 = Tensor::uniform(&[1, 2, 3, 3], -0.5, 0.5, &mut rng);
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
    let c = tape.constant(c0.clone());
    let mut state = CellState::new(h, c);
    for _ in 0..4 {
        let z = tape.constant(Tensor::uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng));
        state = cell.step(&mut tape, z, &state, false).unwrap();
    }
    assert!(tape.value(state.c).max_abs_diff(&c0).unwrap() < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn state_ranges_hold(seed in any::<u64>(), scale in 0.1f64..3.0, input in 0.1f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = random_cell(2, 3, 4, 4, scale, &mut rng);
        let zs: Vec<Tensor<f64>> = (0..5).map(|_| Tensor::uniform(&[1, 2, 4, 4], -input, input, &mut rng)).collect();
        for (t, (h, c)) in run_states(&cell, &zs).iter().enumerate() {
            prop_assert!(h.max_abs() < 1.0);
            prop_assert!(c.max_abs() < (t + 1) as f64);
        }
    }
}
