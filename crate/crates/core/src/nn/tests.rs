use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::*;
use crate::rng::rng_from_seed;

/// Builds a scalar loss from parameter leaves.
type LossFn<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Var;

fn loss_value(params: &ParamSet, f: LossFn) -> f64 {
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape);
    let root = f(&mut tape, &vars);
    tape.value(root).item()
}

/// Max relative error of analytic vs. central-difference gradients over
/// `coords` random parameter coordinates.
fn fd_max_error(params: &ParamSet, f: LossFn, coords: usize, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape);
    let root = f(&mut tape, &vars);
    let mut grads = tape.backward(root).unwrap();
    let analytic = params.collect_grads(&mut grads, &vars);
    let flat_grad: Vec<f64> = analytic.iter().flat_map(|t| t.data.iter().copied()).collect();

    let mut rng = rng_from_seed(seed);
    let base = params.flat();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let k = rng.random_range(0..base.len());
        let mut p = params.clone();
        let mut plus = base.clone();
        plus[k] += eps;
        p.set_flat(&plus).unwrap();
        let lp = loss_value(&p, f);
        let mut minus = base.clone();
        minus[k] -= eps;
        p.set_flat(&minus).unwrap();
        let lm = loss_value(&p, f);
        let numeric = (lp - lm) / (2.0 * eps);
        let err = (flat_grad[k] - numeric).abs() / flat_grad[k].abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}

#[test]
fn square_gradient_at_three() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.square(x);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 6.0);
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(2, 2));
    let y = tape.relu(x);
    assert!(matches!(tape.backward(y), Err(NnError::NonScalarRoot { rows: 2, cols: 2 })));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::scalar(2.0));
    let x = tape.param(Tensor::scalar(5.0));
    let y = tape.mul(c, x);
    let g = tape.backward(y).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap().item(), 2.0);
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let mut rng = rng_from_seed(11);
    let params = mlp_init_sizes(&[25, 256, 256, 1], &mut rng);
    let x = Tensor::uniform(4, 25, 1.0, &mut rng);
    let y = Tensor::uniform(4, 1, 1.0, &mut rng);
    let f = move |tape: &mut Tape, vars: &[Var]| {
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let out = mlp_forward_tape(tape, vars, xv);
        let d = tape.sub(out, yv);
        let sq = tape.square(d);
        tape.mean(sq)
    };
    assert!(fd_max_error(&params, &f, 20, 3) < 1e-4);
}

#[test]
fn lstm_gradients_match_finite_differences() {
    let mut rng = rng_from_seed(12);
    let params = lstm_init(9, 16, &mut rng);
    let seq: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(2, 9, 1.0, &mut rng)).collect();
    let f = move |tape: &mut Tape, vars: &[Var]| {
        let mut h = tape.constant(Tensor::zeros(2, 16));
        let mut c = tape.constant(Tensor::zeros(2, 16));
        for x in &seq {
            let xv = tape.constant(x.clone());
            (h, c) = lstm_step_tape(tape, vars, xv, h, c);
        }
        let sq = tape.square(h);
        tape.sum(sq)
    };
    assert!(fd_max_error(&params, &f, 20, 4) < 1e-4);
}

#[test]
fn every_op_gradient_matches_finite_differences() {
    let mut rng = rng_from_seed(13);
    let mut params = ParamSet::new();
    params.push("a", Tensor::uniform(3, 4, 1.0, &mut rng));
    params.push("b", Tensor::uniform(3, 4, 1.0, &mut rng));
    params.push("w", Tensor::uniform(4, 2, 1.0, &mut rng));
    params.push("bias", Tensor::uniform(1, 2, 1.0, &mut rng));
    params.push("col", Tensor::uniform(3, 1, 1.0, &mut rng));
    params.push("row", Tensor::uniform(1, 4, 1.0, &mut rng));
    let f = |tape: &mut Tape, v: &[Var]| {
        let (a, b, w, bias, col, row) = (v[0], v[1], v[2], v[3], v[4], v[5]);
        let s = tape.add(a, b);
        let d = tape.sub(a, b);
        let m = tape.mul(s, d);
        let mc = tape.mul_col(m, col);
        let t = tape.tanh(mc);
        let sg = tape.sigmoid(d);
        let e = tape.exp(sg);
        let mn = tape.min(t, e);
        let cl = tape.clamp(mn, -0.5, 0.9);
        let rr = tape.repeat_rows(row, 3);
        let z = tape.add(cl, rr);
        let aff = tape.affine(z, w, bias);
        let r = tape.relu(aff);
        let o = tape.offset(r, 0.3);
        let cc = tape.concat_cols(&[o, sg]);
        let sl = tape.col_slice(cc, 1, 4);
        let sc = tape.scale(sl, 1.7);
        let rows = tape.sum_cols(sc);
        let sq = tape.square(rows);
        let m1 = tape.mean(sq);
        let s2 = tape.sum(e);
        let s2 = tape.scale(s2, 0.1);
        tape.add(m1, s2)
    };
    let all: usize = params.num_scalars();
    assert!(fd_max_error(&params, &f, all, 5) < 1e-4);
}

#[test]
fn identity_layer_passes_input_through() {
    let params = vec![Tensor::identity(2), Tensor::zeros(1, 2), Tensor::identity(2), Tensor::zeros(1, 2)];
    let y = mlp_forward(&params, &Tensor::row_vector(&[1.0, 2.0])).unwrap();
    assert_eq!(y.data, vec![1.0, 2.0]);
}

#[test]
fn relu_kills_negative_preactivations() {
    let mut rng = rng_from_seed(1);
    let mut params = mlp_init(3, 5, 2, &mut rng);
    params.tensors[0] = Tensor::filled(3, 5, -1.0);
    params.tensors[1] = Tensor::zeros(1, 5);
    let y = mlp_forward(&params.tensors, &Tensor::row_vector(&[1.0, 2.0, 3.0])).unwrap();
    assert_eq!(y.data, params.tensors[3].data);
}

#[test]
fn mlp_forward_rejects_wrong_width() {
    let mut rng = rng_from_seed(1);
    let params = mlp_init(3, 5, 2, &mut rng);
    assert!(matches!(
        mlp_forward(&params.tensors, &Tensor::row_vector(&[1.0, 2.0])),
        Err(NnError::ShapeMismatch { .. })
    ));
}

#[test]
fn tape_and_plain_forward_agree() {
    let mut rng = rng_from_seed(2);
    let params = mlp_init(6, 32, 3, &mut rng);
    let x = Tensor::uniform(5, 6, 1.0, &mut rng);
    let plain = mlp_forward(&params.tensors, &x).unwrap();
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape);
    let xv = tape.constant(x.clone());
    let out = mlp_forward_tape(&mut tape, &vars, xv);
    assert_eq!(tape.value(out), &plain);
    assert_eq!(mlp_forward(&params.tensors, &x).unwrap(), plain);
}

#[test]
fn lstm_zero_weights_give_zero_state() {
    let mut rng = rng_from_seed(3);
    let mut params = lstm_init(9, 4, &mut rng);
    for t in &mut params.tensors {
        t.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let x = [0.0; 9];
    let h = lstm_forward(&params.tensors, &[&x, &x]).unwrap();
    assert!(h.iter().all(|v| *v == 0.0));
}

#[test]
fn lstm_empty_sequence_is_an_error() {
    let mut rng = rng_from_seed(3);
    let params = lstm_init(9, 4, &mut rng);
    assert_eq!(lstm_forward(&params.tensors, &[]), Err(NnError::EmptySequence));
}

#[test]
fn lstm_single_step_equals_cell() {
    let mut rng = rng_from_seed(4);
    let params = lstm_init(3, 4, &mut rng);
    let x = [0.3, -0.2, 0.9];
    let h = lstm_forward(&params.tensors, &[&x]).unwrap();
    let s = lstm_step(&params.tensors, &Tensor::row_vector(&x), &LstmState::zeros(1, 4));
    assert_eq!(h, s.h.data);
}

#[test]
fn lstm_tape_matches_plain_step() {
    let mut rng = rng_from_seed(5);
    let params = lstm_init(3, 4, &mut rng);
    let xs: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(2, 3, 1.0, &mut rng)).collect();
    let mut state = LstmState::zeros(2, 4);
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape);
    let mut h = tape.constant(Tensor::zeros(2, 4));
    let mut c = tape.constant(Tensor::zeros(2, 4));
    for x in &xs {
        state = lstm_step(&params.tensors, x, &state);
        let xv = tape.constant(x.clone());
        (h, c) = lstm_step_tape(&mut tape, &vars, xv, h, c);
    }
    assert_eq!(tape.value(h), &state.h);
}

#[test]
fn saturated_forget_gate_accumulates_inputs() {
    // One unit; w_ih routes x to the cell gate only, gates saturated open.
    let big = 50.0;
    let params = vec![
        Tensor::from_vec(1, 4, vec![0.0, 0.0, 1.0, 0.0]),
        Tensor::zeros(1, 4),
        Tensor::from_vec(1, 4, vec![big, big, 0.0, big]),
    ];
    let (x1, x2) = (0.2, 0.3);
    let h = lstm_forward(&params, &[&[x1], &[x2]]).unwrap();
    let c2 = x1.tanh() + x2.tanh();
    assert!((h[0] - c2.tanh()).abs() < 1e-9);
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut rng = rng_from_seed(6);
    let mut params = mlp_init(2, 3, 1, &mut rng);
    let before = params.clone();
    let mut adam = AdamState::new(&params, 3e-4);
    let zeros: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
    adam.update(&mut params, &zeros);
    assert_eq!(params, before);
    assert_eq!(adam.step, 1);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut params = ParamSet::new();
    params.push("p", Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5]));
    let before = params.flat();
    let mut adam = AdamState::new(&params, 3e-4);
    adam.update(&mut params, &[Tensor::from_vec(1, 3, vec![0.7, -3.0, 1e-3])]);
    for (i, (a, b)) in params.flat().iter().zip(&before).enumerate() {
        let step = b - a;
        let sign = [1.0, -1.0, 1.0][i];
        assert!((step * sign - 3e-4).abs() / 3e-4 < 1e-4, "coord {i}: {step}");
    }
}

#[test]
fn adam_constant_gradient_drifts_monotonically() {
    let mut params = ParamSet::new();
    params.push("p", Tensor::scalar(0.0));
    let mut adam = AdamState::new(&params, 1e-2);
    let mut prev = 0.0;
    for _ in 0..100 {
        adam.update(&mut params, &[Tensor::scalar(2.0)]);
        let now = params.flat()[0];
        assert!(now < prev);
        prev = now;
    }
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut rng = rng_from_seed(9);
        let mut params = mlp_init(4, 16, 1, &mut rng);
        let mut adam = AdamState::new(&params, 1e-2);
        let x = Tensor::uniform(8, 4, 1.0, &mut rng);
        let y = Tensor::uniform(8, 1, 1.0, &mut rng);
        for _ in 0..50 {
            let mut tape = Tape::new();
            let vars = params.on_tape(&mut tape);
            let xv = tape.constant(x.clone());
            let yv = tape.constant(y.clone());
            let out = mlp_forward_tape(&mut tape, &vars, xv);
            let d = tape.sub(out, yv);
            let sq = tape.square(d);
            let loss = tape.mean(sq);
            let mut g = tape.backward(loss).unwrap();
            let grads = params.collect_grads(&mut g, &vars);
            adam.update(&mut params, &grads);
        }
        params.checksum()
    };
    assert_eq!(run(), run());
}

#[test]
fn soft_update_interpolates() {
    let mut a = ParamSet::new();
    a.push("p", Tensor::scalar(0.0));
    let mut b = ParamSet::new();
    b.push("p", Tensor::scalar(1.0));
    a.soft_update_from(&b, 0.25);
    assert_eq!(a.flat(), vec![0.25]);
}
