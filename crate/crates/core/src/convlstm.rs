//! Single-layer peephole ConvLSTM.
//!
//! One step, with `*` a same-size 3x3 convolution and `⊙` the elementwise
//! product:
//!
//! ```text
//! i = σ(W_i*z + V_i*h + U_i⊙c_prev + b_i)
//! f = σ(W_f*z + V_f*h + U_f⊙c_prev + b_f)
//! c = f⊙c_prev + i⊙tanh(W_c*z + V_c*h + b_c)
//! o = σ(W_o*z + V_o*h + U_o⊙c + b_o)
//! h = o⊙tanh(c)
//! ```
//!
//! The output-gate peephole reads the *updated* cell; the candidate has no
//! peephole. `U` and `b` are full `[Ch,H,W]` maps, so a cell is tied to the
//! feature-map size it was built for.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::ConvGeometry;
use crate::params::Parameterized;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PREFIX: &str = "convlstm";
const GATES: [&str; 4] = ["i", "f", "c", "o"];
const PEEPHOLE_GATES: [&str; 3] = ["i", "f", "o"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellInit {
    /// Initial value of every element of `b_f`.
    pub forget_bias: f64,
}

impl Default for CellInit {
    fn default() -> Self {
        Self { forget_bias: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmCell<T> {
    input_channels: usize,
    hidden_channels: usize,
    height: usize,
    width: usize,
    /// Input kernels `[Ch,Cz,3,3]` for gates i, f, c, o.
    pub w: [Tensor<T>; 4],
    /// Recurrent kernels `[Ch,Ch,3,3]` for gates i, f, c, o.
    pub v: [Tensor<T>; 4],
    /// Peephole maps `[Ch,H,W]` for gates i, f, o.
    pub u: [Tensor<T>; 3],
    /// Bias maps `[Ch,H,W]` for gates i, f, c, o.
    pub b: [Tensor<T>; 4],
}

/// Hidden and cell state, each `[N,Ch,H,W]`.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub h: Var,
    pub c: Var,
    zero: bool,
}

impl CellState {
    pub fn new(h: Var, c: Var) -> Self {
        Self { h, c, zero: false }
    }

    /// The all-zero initial state. Steps from it skip the terms that are
    /// identically zero (`V*h`, `U⊙c`, `f⊙c`).
    pub fn zeros<T: Scalar>(tape: &mut Tape<T>, shape: [usize; 4]) -> Self {
        let h = tape.constant(Tensor::zeros(&shape));
        let c = tape.constant(Tensor::zeros(&shape));
        Self { h, c, zero: true }
    }
}

impl<T: Scalar> ConvLstmCell<T> {
    /// All parameters zero.
    pub fn zeros(input_channels: usize, hidden_channels: usize, height: usize, width: usize) -> Self {
        let kw = |cin| Tensor::zeros(&[hidden_channels, cin, 3, 3]);
        let map = || Tensor::zeros(&[hidden_channels, height, width]);
        Self {
            input_channels,
            hidden_channels,
            height,
            width,
            w: std::array::from_fn(|_| kw(input_channels)),
            v: std::array::from_fn(|_| kw(hidden_channels)),
            u: std::array::from_fn(|_| map()),
            b: std::array::from_fn(|_| map()),
        }
    }

    /// Kernels uniform in `±1/sqrt(fan_in)`; peepholes and biases zero
    /// except `b_f`, which starts at `init.forget_bias`.
    pub fn new<R: Rng + ?Sized>(
        input_channels: usize,
        hidden_channels: usize,
        height: usize,
        width: usize,
        init: CellInit,
        rng: &mut R,
    ) -> Self {
        let mut cell = Self::zeros(input_channels, hidden_channels, height, width);
        let kz = 1.0 / ((input_channels * 9) as f64).sqrt();
        let kh = 1.0 / ((hidden_channels * 9) as f64).sqrt();
        for w in &mut cell.w {
            *w = Tensor::uniform(w.shape(), -kz, kz, rng);
        }
        for v in &mut cell.v {
            *v = Tensor::uniform(v.shape(), -kh, kh, rng);
        }
        cell.b[1] = Tensor::full(&[hidden_channels, height, width], T::of(init.forget_bias));
        cell
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn hidden_channels(&self) -> usize {
        self.hidden_channels
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn check_input(&self, tape: &Tape<T>, z: Var) -> Result<usize> {
        let s = tape.value(z).shape();
        if s.len() != 4 || s[1] != self.input_channels {
            return Err(Error::shape(format!(
                "ConvLSTM expects [N,{},{},{}] input, got {s:?}",
                self.input_channels, self.height, self.width
            )));
        }
        if (s[2], s[3]) != (self.height, self.width) {
            return Err(Error::shape(format!(
                "ConvLSTM was constructed for {}x{} feature maps, got {}x{}",
                self.height, self.width, s[2], s[3]
            )));
        }
        Ok(s[0])
    }

    fn state_shape(&self, n: usize) -> [usize; 4] {
        [n, self.hidden_channels, self.height, self.width]
    }

    /// One recurrence step.
    pub fn step(&self, tape: &mut Tape<T>, z: Var, state: &CellState, trainable: bool) -> Result<CellState> {
        let n = self.check_input(tape, z)?;
        let shape = self.state_shape(n);
        if !state.zero {
            for v in [state.h, state.c] {
                if tape.value(v).shape() != shape {
                    return Err(Error::shape(format!(
                        "ConvLSTM state must be {shape:?}, got {:?}",
                        tape.value(v).shape()
                    )));
                }
            }
        }
        let ch = self.hidden_channels;
        let names = self.names();
        let param = |tape: &mut Tape<T>, idx: usize| {
            let (name, t) = &names[idx];
            tape.param(name, t, trainable)
        };

        let w: Vec<Var> = (0..4).map(|g| param(tape, g)).collect();
        let w_all = tape.concat(&w, 0)?;
        let mut pre = tape.conv2d(z, w_all, None, ConvGeometry::SAME_3X3)?;
        if !state.zero {
            let v: Vec<Var> = (4..8).map(|g| param(tape, g)).collect();
            let v_all = tape.concat(&v, 0)?;
            let vh = tape.conv2d(state.h, v_all, None, ConvGeometry::SAME_3X3)?;
            pre = tape.add(pre, vh)?;
        }
        let gate_pre = |tape: &mut Tape<T>, gate: usize| -> Result<Var> {
            let sliced = tape.slice(pre, 1, gate * ch, ch)?;
            let b = param(tape, 11 + gate);
            let b = tape.repeat_batch(b, n)?;
            tape.add(sliced, b)
        };
        let peephole = |tape: &mut Tape<T>, acc: Var, u_idx: usize, c: Var| -> Result<Var> {
            let u = param(tape, 8 + u_idx);
            let u = tape.repeat_batch(u, n)?;
            let uc = tape.mul(u, c)?;
            tape.add(acc, uc)
        };

        let mut i_pre = gate_pre(tape, 0)?;
        let mut f_pre = gate_pre(tape, 1)?;
        if !state.zero {
            i_pre = peephole(tape, i_pre, 0, state.c)?;
            f_pre = peephole(tape, f_pre, 1, state.c)?;
        }
        let i = tape.sigmoid(i_pre)?;
        let cand_pre = gate_pre(tape, 2)?;
        let cand = tape.tanh(cand_pre)?;
        let mut c = tape.mul(i, cand)?;
        if !state.zero {
            let f = tape.sigmoid(f_pre)?;
            let carried = tape.mul(f, state.c)?;
            c = tape.add(carried, c)?;
        }
        let o_pre = gate_pre(tape, 3)?;
        let o_pre = peephole(tape, o_pre, 2, c)?;
        let o = tape.sigmoid(o_pre)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok(CellState::new(h, c))
    }

    /// Runs the recurrence from the zero state and returns every state.
    pub fn encode_states(&self, tape: &mut Tape<T>, zs: &[Var], trainable: bool) -> Result<Vec<CellState>> {
        let first = zs.first().ok_or_else(|| Error::invalid("encode_sequence needs at least one frame"))?;
        let shape0 = tape.value(*first).shape().to_vec();
        if zs.iter().any(|z| tape.value(*z).shape() != shape0) {
            return Err(Error::shape("encode_sequence: feature maps differ in shape"));
        }
        let n = self.check_input(tape, *first)?;
        let mut state = CellState::zeros(tape, self.state_shape(n));
        let mut states = Vec::with_capacity(zs.len());
        for &z in zs {
            state = self.step(tape, z, &state, trainable)?;
            states.push(state);
        }
        Ok(states)
    }

    /// The last hidden state `h_T`.
    pub fn encode(&self, tape: &mut Tape<T>, zs: &[Var], trainable: bool) -> Result<Var> {
        Ok(self.encode_states(tape, zs, trainable)?.last().expect("non-empty").h)
    }

    fn names(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(15);
        for (g, t) in GATES.iter().zip(&self.w) {
            out.push((format!("{PREFIX}.W_{g}"), t));
        }
        for (g, t) in GATES.iter().zip(&self.v) {
            out.push((format!("{PREFIX}.V_{g}"), t));
        }
        for (g, t) in PEEPHOLE_GATES.iter().zip(&self.u) {
            out.push((format!("{PREFIX}.U_{g}"), t));
        }
        for (g, t) in GATES.iter().zip(&self.b) {
            out.push((format!("{PREFIX}.b_{g}"), t));
        }
        out
    }
}

impl<T: Scalar> Parameterized<T> for ConvLstmCell<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        self.names()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::with_capacity(15);
        for (g, t) in GATES.iter().zip(&mut self.w) {
            out.push((format!("{PREFIX}.W_{g}"), t));
        }
        for (g, t) in GATES.iter().zip(&mut self.v) {
            out.push((format!("{PREFIX}.V_{g}"), t));
        }
        for (g, t) in PEEPHOLE_GATES.iter().zip(&mut self.u) {
            out.push((format!("{PREFIX}.U_{g}"), t));
        }
        for (g, t) in GATES.iter().zip(&mut self.b) {
            out.push((format!("{PREFIX}.b_{g}"), t));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_cell_from_zero_state_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = ConvLstmCell::<f64>::zeros(2, 3, 4, 4);
        let mut tape = Tape::new();
        let zs: Vec<Var> = (0..4)
            .map(|_| tape.constant(Tensor::uniform(&[2, 2, 4, 4], -5.0, 5.0, &mut rng)))
            .collect();
        for s in cell.encode_states(&mut tape, &zs, true).unwrap() {
            assert!(tape.value(s.h).data().iter().all(|&v| v == 0.0));
            assert!(tape.value(s.c).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn saturated_gates_carry_memory() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cell = ConvLstmCell::<f64>::zeros(2, 3, 4, 4);
        cell.b[0] = Tensor::full(&[3, 4, 4], -10.0);
        cell.b[1] = Tensor::full(&[3, 4, 4], 10.0);
        let mut tape = Tape::new();
        let c0 = Tensor::uniform(&[1, 3, 4, 4], -0.9, 0.9, &mut rng);
        let h0 = tape.constant(Tensor::uniform(&[1, 3, 4, 4], -0.9, 0.9, &mut rng));
        let c0v = tape.constant(c0.clone());
        let z = tape.constant(Tensor::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng));
        let s = cell.step(&mut tape, z, &CellState::new(h0, c0v), true).unwrap();
        assert!(tape.value(s.c).max_abs_diff(&c0).unwrap() < 1e-4);
    }

    #[test]
    fn wrong_spatial_size_rejected() {
        let cell = ConvLstmCell::<f32>::zeros(2, 3, 4, 4);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 2, 5, 4]));
        let err = cell.encode(&mut tape, &[z], true).unwrap_err();
        assert!(err.to_string().contains("4x4"), "{err}");
        assert!(cell.encode(&mut tape, &[], true).is_err());
    }

    #[test]
    fn fifteen_named_groups() {
        let cell = ConvLstmCell::<f32>::zeros(2, 3, 4, 4);
        let names: Vec<String> = cell.params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 15);
        assert_eq!(names[0], "convlstm.W_i");
        assert_eq!(names[10], "convlstm.U_o");
        assert_eq!(names[14], "convlstm.b_o");
    }
}
