use alloc::format;
use alloc::vec::Vec;

use super::params::ParamSet;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::NnError;
use crate::math;
use crate::rng::SimRng;

/// Two affine layers with a ReLU between: `in -> hidden -> out`.
pub fn mlp_init(input: usize, hidden: usize, output: usize, rng: &mut SimRng) -> ParamSet {
    mlp_init_sizes(&[input, hidden, output], rng)
}

/// Affine layers `sizes[0] -> sizes[1] -> ...` with ReLU between them;
/// parameters `l1.w, l1.b, l2.w, ...`, uniform in `+-1/sqrt(fan_in)`.
pub fn mlp_init_sizes(sizes: &[usize], rng: &mut SimRng) -> ParamSet {
    let mut p = ParamSet::new();
    for (k, pair) in sizes.windows(2).enumerate() {
        let bound = 1.0 / math::sqrt(pair[0] as f64);
        p.push(&format!("l{}.w", k + 1), Tensor::uniform(pair[0], pair[1], bound, rng));
        p.push(&format!("l{}.b", k + 1), Tensor::uniform(1, pair[1], bound, rng));
    }
    p
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Batched forward pass of a network built by [`mlp_init_sizes`]; `x` is `B x in`.
pub fn mlp_forward(params: &[Tensor], x: &Tensor) -> Result<Tensor, NnError> {
    let w1 = &params[0];
    if x.cols != w1.rows {
        return Err(NnError::ShapeMismatch { expected: (x.rows, w1.rows), got: x.shape() });
    }
    let layers = params.len() / 2;
    let mut h = x.affine(&params[0], &params[1]);
    for k in 1..layers {
        h = h.map(relu).affine(&params[2 * k], &params[2 * k + 1]);
    }
    Ok(h)
}

pub fn mlp_forward_tape(tape: &mut Tape, vars: &[Var], x: Var) -> Var {
    let mut h = tape.affine(x, vars[0], vars[1]);
    for k in 1..vars.len() / 2 {
        let a = tape.relu(h);
        h = tape.affine(a, vars[2 * k], vars[2 * k + 1]);
    }
    h
}

/// `w_ih: in x 4h`, `w_hh: h x 4h`, `b: 1 x 4h`; gate order input, forget,
/// cell, output.
pub fn lstm_init(input: usize, hidden: usize, rng: &mut SimRng) -> ParamSet {
    let bound = 1.0 / math::sqrt(hidden as f64);
    let mut b = Tensor::uniform(1, 4 * hidden, bound, rng);
    for v in &mut b.data[hidden..2 * hidden] {
        *v = 1.0;
    }
    let mut p = ParamSet::new();
    p.push("w_ih", Tensor::uniform(input, 4 * hidden, bound, rng));
    p.push("w_hh", Tensor::uniform(hidden, 4 * hidden, bound, rng));
    p.push("b", b);
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        LstmState { h: Tensor::zeros(batch, hidden), c: Tensor::zeros(batch, hidden) }
    }
}

pub fn lstm_step(params: &[Tensor], x: &Tensor, state: &LstmState) -> LstmState {
    let hidden = params[1].rows;
    let mut gates = x.affine(&params[0], &params[2]);
    gates.add_assign(&state.h.matmul(&params[1]));
    let mut h = Tensor::zeros(x.rows, hidden);
    let mut c = Tensor::zeros(x.rows, hidden);
    for r in 0..x.rows {
        let g = gates.row(r);
        for j in 0..hidden {
            let i = math::sigmoid(g[j]);
            let f = math::sigmoid(g[hidden + j]);
            let gg = math::tanh(g[2 * hidden + j]);
            let o = math::sigmoid(g[3 * hidden + j]);
            let cv = f * state.c.get(r, j) + i * gg;
            c.set(r, j, cv);
            h.set(r, j, o * math::tanh(cv));
        }
    }
    LstmState { h, c }
}

pub fn lstm_step_tape(tape: &mut Tape, vars: &[Var], x: Var, h: Var, c: Var) -> (Var, Var) {
    let hidden = tape.value(vars[1]).rows;
    let xi = tape.affine(x, vars[0], vars[2]);
    let hh = tape.matmul(h, vars[1]);
    let gates = tape.add(xi, hh);
    let i = tape.col_slice(gates, 0, hidden);
    let i = tape.sigmoid(i);
    let f = tape.col_slice(gates, hidden, hidden);
    let f = tape.sigmoid(f);
    let g = tape.col_slice(gates, 2 * hidden, hidden);
    let g = tape.tanh(g);
    let o = tape.col_slice(gates, 3 * hidden, hidden);
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, c);
    let ig = tape.mul(i, g);
    let c2 = tape.add(fc, ig);
    let tc = tape.tanh(c2);
    let h2 = tape.mul(o, tc);
    (h2, c2)
}

/// Runs a single sequence and returns the final hidden state.
pub fn lstm_forward(params: &[Tensor], seq: &[&[f64]]) -> Result<Vec<f64>, NnError> {
    if seq.is_empty() {
        return Err(NnError::EmptySequence);
    }
    let input = params[0].rows;
    let hidden = params[1].rows;
    let mut state = LstmState::zeros(1, hidden);
    for x in seq {
        if x.len() != input {
            return Err(NnError::ShapeMismatch { expected: (1, input), got: (1, x.len()) });
        }
        state = lstm_step(params, &Tensor::row_vector(x), &state);
    }
    Ok(state.h.data)
}
