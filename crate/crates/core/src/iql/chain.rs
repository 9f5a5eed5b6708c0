//! Deterministic chain MDPs with a value-iteration oracle, used to check that
//! offline training stitches suboptimal demonstrations.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{AgentCheckpoint, OfflineData};
use crate::rng::SimRng;

/// `n` states on a line, actions left/right, reward `-1` per step, episode
/// ends on entering `goal`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainMdp {
    pub n: usize,
    pub goal: usize,
    pub gamma: f64,
}

/// `(state, right, reward, next_state, done)`.
pub type ChainStep = (usize, bool, f64, usize, bool);

impl ChainMdp {
    pub fn random(n: usize, gamma: f64, rng: &mut SimRng) -> Self {
        let goal = if rng.random_bool(0.5) { 0 } else { n - 1 };
        ChainMdp { n, goal, gamma }
    }

    pub fn step(&self, s: usize, right: bool) -> ChainStep {
        let next = if right { (s + 1).min(self.n - 1) } else { s.saturating_sub(1) };
        (s, right, -1.0, next, next == self.goal)
    }

    fn toward_goal(&self) -> bool {
        self.goal == self.n - 1
    }

    /// Optimal state values and greedy actions (`None` at the goal).
    pub fn value_iteration(&self) -> (Vec<f64>, Vec<Option<bool>>) {
        let mut v = vec![0.0; self.n];
        for _ in 0..10_000 {
            let mut next = v.clone();
            for s in 0..self.n {
                if s == self.goal {
                    continue;
                }
                next[s] = [false, true]
                    .iter()
                    .map(|&a| self.q_of(&v, s, a))
                    .fold(f64::NEG_INFINITY, f64::max);
            }
            let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            if delta < 1e-12 {
                break;
            }
        }
        let policy = (0..self.n)
            .map(|s| (s != self.goal).then(|| self.q_of(&v, s, true) > self.q_of(&v, s, false)))
            .collect();
        (v, policy)
    }

    fn q_of(&self, v: &[f64], s: usize, right: bool) -> f64 {
        let (_, _, r, n, done) = self.step(s, right);
        r + if done { 0.0 } else { self.gamma * v[n] }
    }

    /// Two overlapping suboptimal demonstrations: one advances toward the
    /// goal and turns back before reaching it; the other starts inside the
    /// first one's span, steps away once, then runs to the goal.
    pub fn demos(&self, rng: &mut SimRng) -> [Vec<ChainStep>; 2] {
        let fwd = self.toward_goal();
        // positions measured as distance from the far end
        let to_state = |p: usize| if fwd { p } else { self.n - 1 - p };
        let last = self.n - 1;
        let start = rng.random_range(0..=1usize);
        let junction = rng.random_range(start + 1..last);
        let b = rng.random_range(start..=junction);

        let mut a = Vec::new();
        let mut p = start;
        while p < junction {
            a.push(self.step(to_state(p), fwd));
            p += 1;
        }
        while p > start {
            a.push(self.step(to_state(p), !fwd));
            p -= 1;
        }

        let mut bt = Vec::new();
        let mut p = b;
        if p > 0 {
            bt.push(self.step(to_state(p), !fwd));
            p -= 1;
        }
        while p < last {
            bt.push(self.step(to_state(p), fwd));
            p += 1;
        }
        [a, bt]
    }

    pub fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n];
        v[s] = 1.0;
        v
    }

    /// One-hot states, actions `-1` (left) / `+1` (right).
    pub fn offline_data(&self, demos: &[Vec<ChainStep>]) -> OfflineData {
        let mut d = OfflineData::new(self.n, 1);
        for demo in demos {
            for &(s, right, r, n, done) in demo {
                d.push(&self.one_hot(s), &[if right { 1.0 } else { -1.0 }], r, &self.one_hot(n), done);
            }
        }
        d
    }

    /// Non-goal states visited by `demos`, in increasing order.
    pub fn covered_states(&self, demos: &[Vec<ChainStep>]) -> Vec<usize> {
        let mut s: Vec<usize> = demos
            .iter()
            .flat_map(|d| d.iter().flat_map(|t| [t.0, t.3]))
            .filter(|s| *s != self.goal)
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Whether the greedy (mean) action of `ckpt` agrees with value
    /// iteration on every covered state; returns the mismatching states.
    pub fn greedy_mismatches(&self, ckpt: &AgentCheckpoint, demos: &[Vec<ChainStep>]) -> Vec<usize> {
        let (_, opt) = self.value_iteration();
        self.covered_states(demos)
            .into_iter()
            .filter(|&s| {
                let mean = ckpt
                    .policy_mean(&crate::nn::Tensor::row_vector(&self.one_hot(s)))
                    .expect("one-hot width")
                    .item();
                Some(mean > 0.0) != opt[s]
            })
            .collect()
    }
}
