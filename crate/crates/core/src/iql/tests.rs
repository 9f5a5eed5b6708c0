use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::Rng;

use super::chain::ChainMdp;
use super::*;
use crate::rng::rng_from_seed;

fn small_hyper(steps: usize) -> IqlHyper {
    IqlHyper { gradient_steps: steps, hidden: 64, batch: 64, lr: 1e-3, ..IqlHyper::default() }
}

#[test]
fn expectile_loss_examples() {
    assert_eq!(expectile_loss(2.0, 0.5), 2.0);
    assert!((expectile_loss(1.0, 0.7) - 0.7).abs() < 1e-15);
    assert!((expectile_loss(-1.0, 0.7) - 0.3).abs() < 1e-15);
}

proptest! {
    #[test]
    fn expectile_half_is_mean(xs in prop::collection::vec(-100.0f64..100.0, 1..50)) {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        prop_assert!((expectile(&xs, 0.5) - mean).abs() < 1e-6);
    }

    #[test]
    fn expectile_is_monotone_in_tau(xs in prop::collection::vec(-100.0f64..100.0, 1..50)) {
        let mut prev = f64::NEG_INFINITY;
        for k in 1..20 {
            let tau = k as f64 / 20.0;
            let e = expectile(&xs, tau);
            prop_assert!(e >= prev - 1e-9);
            prev = e;
        }
    }

    #[test]
    fn expectile_is_a_stationary_point(xs in prop::collection::vec(-10.0f64..10.0, 1..30), tau in 0.05f64..0.95) {
        let m = expectile(&xs, tau);
        let grad: f64 = xs.iter().map(|x| {
            let u = x - m;
            let w = if u < 0.0 { 1.0 - tau } else { tau };
            w * u
        }).sum();
        prop_assert!(grad.abs() < 1e-8);
    }

    #[test]
    fn clamped_actions_stay_in_box(seed in any::<u64>()) {
        let ckpt = AgentCheckpoint::init(Algo::Iql, 4, 3, small_hyper(0), seed);
        let mut rng = rng_from_seed(seed);
        let obs = [10.0, -3.0, 0.5, 100.0];
        for mode in [ActMode::Eval, ActMode::Sample] {
            for v in ckpt.act(&obs, mode, &mut rng) {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
        }
    }
}

/// Fixed sample set shared with the acceptance suite.
pub(crate) const EXPECTILE_SAMPLES: [f64; 10] = [1.0, 2.5, 3.0, 4.2, 5.5, 6.1, 7.3, 8.0, 9.4, 10.0];

#[test]
fn expectile_high_tau_approaches_max() {
    let xs = EXPECTILE_SAMPLES;
    let e = expectile(&xs, 0.99);
    assert!((10.0 - e) / 10.0 < 0.05, "{e}");
    let dense: Vec<f64> = (1..=100).map(|k| k as f64).collect();
    assert!(100.0 - expectile(&dense, 0.999_999) < 0.01);
}

#[test]
fn hyper_validation() {
    assert!(IqlHyper::default().validate().is_ok());
    assert!(IqlHyper { expectile_tau: 0.4, ..IqlHyper::default() }.validate().is_err());
    assert!(IqlHyper { gamma: 1.0, ..IqlHyper::default() }.validate().is_err());
}

#[test]
fn chain_value_iteration_moves_toward_goal() {
    let m = ChainMdp { n: 5, goal: 4, gamma: 0.99 };
    let (v, pi) = m.value_iteration();
    assert_eq!(pi, vec![Some(true), Some(true), Some(true), Some(true), None]);
    assert!((v[3] + 1.0).abs() < 1e-12);
    assert!((v[2] + 1.99).abs() < 1e-12);
}

#[test]
fn chain_demos_are_suboptimal_and_overlap() {
    let mut rng = rng_from_seed(4);
    for _ in 0..20 {
        let m = ChainMdp::random(5, 0.99, &mut rng);
        let [a, b] = m.demos(&mut rng);
        assert!(!a.iter().any(|t| t.4), "first demo never reaches the goal");
        assert!(b.last().unwrap().4);
        let sa: Vec<usize> = a.iter().map(|t| t.0).collect();
        assert!(b.iter().any(|t| sa.contains(&t.0)));
    }
}

#[test]
fn iql_stitches_a_chain() {
    let mut rng = rng_from_seed(21);
    let m = ChainMdp::random(5, 0.99, &mut rng);
    let demos = m.demos(&mut rng);
    let data = m.offline_data(&demos);
    let ckpt = train_on(&data, Algo::Iql, &small_hyper(1500), 3).unwrap();
    assert_eq!(m.greedy_mismatches(&ckpt, &demos), Vec::<usize>::new());
}

#[test]
fn zero_discount_regresses_immediate_reward() {
    let mut rng = rng_from_seed(5);
    let mut data = OfflineData::new(5, 1);
    let mut truth = Vec::new();
    for s in 0..5 {
        for a in [-1.0, 1.0] {
            let r = -rng.random_range(0.0..1.0);
            let mut o = vec![0.0; 5];
            o[s] = 1.0;
            data.push(&o, &[a], r, &o, false);
            truth.push((o, a, r));
        }
    }
    let h = IqlHyper { gamma: 0.0, ..small_hyper(2000) };
    let ckpt = train_on(&data, Algo::Iql, &h, 8).unwrap();
    for (o, a, r) in truth {
        let (q1, q2, _) = ckpt.values(&o, &[a]).unwrap();
        assert!((q1 - r).abs() < 0.05 && (q2 - r).abs() < 0.05, "{q1} {q2} vs {r}");
    }
}

#[test]
fn bc_overfits_a_single_transition() {
    let mut data = OfflineData::new(3, 2);
    data.push(&[0.5, -0.2, 1.0], &[0.3, -0.6], -1.0, &[0.0; 3], true);
    let h = IqlHyper { lr: 1e-3, ..small_hyper(3000) };
    let ckpt = train_on(&data, Algo::Bc, &h, 1).unwrap();
    let mean = ckpt.policy_mean(&Tensor::row_vector(&[0.5, -0.2, 1.0])).unwrap();
    assert!((mean.data[0] - 0.3).abs() < 1e-3 && (mean.data[1] + 0.6).abs() < 1e-3, "{:?}", mean.data);
    assert!(ckpt.critics.is_none());
}

#[test]
fn bc_loss_decreases_on_average() {
    let mut rng = rng_from_seed(3);
    let mut data = OfflineData::new(4, 2);
    for _ in 0..64 {
        let o: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = [0.5 * o[0].tanh(), -0.3 * o[1]];
        data.push(&o, &a, 0.0, &o, false);
    }
    let ckpt = AgentCheckpoint::init(Algo::Bc, 4, 2, small_hyper(0), 2);
    let mut t = Trainer::new(ckpt, 2);
    let mut epochs = Vec::new();
    for _ in 0..5 {
        let mut s = 0.0;
        for _ in 0..100 {
            s += t.step(&data).unwrap().pi_loss;
        }
        epochs.push(s / 100.0);
    }
    assert!(epochs.windows(2).all(|w| w[1] < w[0]), "{epochs:?}");
}

#[test]
fn training_is_bit_reproducible() {
    let mut rng = rng_from_seed(9);
    let m = ChainMdp::random(5, 0.99, &mut rng);
    let data = m.offline_data(&m.demos(&mut rng));
    for algo in [Algo::Iql, Algo::Bc] {
        let a = train_on(&data, algo, &small_hyper(50), 4).unwrap();
        let b = train_on(&data, algo, &small_hyper(50), 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
    }
}

#[test]
fn awr_weights_are_positive_and_clipped() {
    let mut rng = rng_from_seed(10);
    let m = ChainMdp::random(5, 0.99, &mut rng);
    let data = m.offline_data(&m.demos(&mut rng));
    let h = IqlHyper { weight_clip: 5.0, ..small_hyper(0) };
    let mut t = Trainer::new(AgentCheckpoint::init(Algo::Iql, 5, 1, h, 1), 1);
    for _ in 0..300 {
        let s = t.step(&data).unwrap();
        assert!(s.weight_min > 0.0 && s.weight_max <= 5.0);
    }
}

#[test]
fn target_critics_lag_by_soft_updates() {
    let mut rng = rng_from_seed(11);
    let m = ChainMdp::random(5, 0.99, &mut rng);
    let data = m.offline_data(&m.demos(&mut rng));
    let h = small_hyper(0);
    let init = AgentCheckpoint::init(Algo::Iql, 5, 1, h, 1);
    let mut t = Trainer::new(init.clone(), 1);
    t.step(&data).unwrap();
    let c0 = init.critics.unwrap();
    let c1 = t.ckpt.critics.as_ref().unwrap();
    let mut expect = c0.q1_target.clone();
    expect.soft_update_from(&c1.q1, h.target_soft_update);
    assert_eq!(c1.q1_target, expect);
}

#[test]
fn sample_mode_mean_matches_eval_action() {
    let mut ckpt = AgentCheckpoint::init(Algo::Iql, 3, 2, small_hyper(0), 6);
    ckpt.policy.tensors[4] = Tensor::from_vec(1, 2, vec![-2.0, -2.5]);
    let obs = [0.2, 0.1, -0.4];
    let mut rng = rng_from_seed(1);
    let eval = ckpt.act(&obs, ActMode::Eval, &mut rng);
    assert_eq!(eval, ckpt.act(&obs, ActMode::Eval, &mut rng));
    let n = 10_000;
    let mut sum = [0.0; 2];
    for _ in 0..n {
        let a = ckpt.act(&obs, ActMode::Sample, &mut rng);
        sum[0] += a[0];
        sum[1] += a[1];
    }
    for (j, ls) in [-2.0f64, -2.5].iter().enumerate() {
        let se = ls.exp() / (n as f64).sqrt();
        assert!((sum[j] / n as f64 - eval[j]).abs() < 3.0 * se);
    }
}

#[test]
fn empty_data_is_rejected() {
    let data = OfflineData::new(3, 1);
    assert_eq!(train_on(&data, Algo::Iql, &small_hyper(1), 1), Err(IqlError::Empty));
}
