//! Multi-trial evaluation, the vertical-downward baseline, and
//! jamming-free-rate curves.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoder::LatentZ;
use crate::episode::{
    episode_seeds, run_baseline_episode, run_episode, EpisodeConfig, EpisodePolicy, Outcome, ScriptedPolicy,
    Source, Trajectory, AGENT_DT,
};
use crate::iql::{ActMode, Agent};
use crate::math;
use crate::primitive::NormalizedAction;
use crate::rng::{derive_seed, stream};
use crate::terrain::{SimError, TerrainKind, TerrainSpec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("no trajectory records")]
    EmptyRecords,
}

/// One evaluated episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub reward: f64,
    /// Seconds.
    pub duration: f64,
    /// Mean over steps of the Euclidean norm of the step's mean force.
    pub avg_force: f64,
    pub max_force: f64,
    pub outcome: Outcome,
}

impl TrialRecord {
    pub fn from_trajectory(t: &Trajectory) -> Self {
        let n = t.len();
        let avg_force = if n == 0 {
            0.0
        } else {
            (0..n)
                .map(|i| {
                    let c = t.next_context(i);
                    math::sqrt(c[6] * c[6] + c[7] * c[7] + c[8] * c[8])
                })
                .sum::<f64>()
                / n as f64
        };
        TrialRecord {
            seed: t.seed,
            reward: t.total_reward(),
            duration: n as f64 * AGENT_DT,
            avg_force,
            max_force: t.max_force,
            outcome: t.outcome,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub terrain: TerrainKind,
    pub policy_id: String,
    pub trials: usize,
    pub reward_mean: f64,
    /// Unbiased; 0 when `single_trial`.
    pub reward_std: f64,
    pub single_trial: bool,
    pub mean_duration: f64,
    pub mean_avg_force: f64,
    pub jam_count: usize,
    pub records: Vec<TrialRecord>,
}

impl EvalReport {
    pub fn from_records(terrain: TerrainKind, policy_id: &str, records: Vec<TrialRecord>) -> Self {
        let n = records.len();
        let rewards: Vec<f64> = records.iter().map(|r| r.reward).collect();
        let (reward_mean, reward_std) = if n == 0 { (0.0, 0.0) } else { math::mean_std(&rewards) };
        let mean_of = |f: fn(&TrialRecord) -> f64| {
            if n == 0 {
                0.0
            } else {
                records.iter().map(f).sum::<f64>() / n as f64
            }
        };
        EvalReport {
            terrain,
            policy_id: String::from(policy_id),
            trials: n,
            reward_mean,
            reward_std,
            single_trial: n == 1,
            mean_duration: mean_of(|r| r.duration),
            mean_avg_force: mean_of(|r| r.avg_force),
            jam_count: records.iter().filter(|r| r.outcome == Outcome::Jam).count(),
            records,
        }
    }

    pub fn from_trajectories(terrain: TerrainKind, policy_id: &str, trajs: &[Trajectory]) -> Self {
        Self::from_records(terrain, policy_id, trajs.iter().map(TrialRecord::from_trajectory).collect())
    }

    pub fn jam_rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.jam_count as f64 / self.trials as f64
        }
    }

    pub fn max_forces(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.max_force).collect()
    }
}

/// What to roll out during evaluation.
pub enum EvalPolicy<'a> {
    Agent { agent: &'a Agent, z_demo: LatentZ },
    Baseline,
    Scripted,
    Zero,
}

/// Seeds of the `trials` evaluation episodes derived from `seed`.
pub fn trial_seeds(seed: u64, trials: usize) -> Vec<u64> {
    episode_seeds(derive_seed(seed, stream::EVAL), trials)
}

/// Runs `trials` episodes (eval mode for agents) on distinct derived seeds.
pub fn evaluate(
    policy: &EvalPolicy,
    policy_id: &str,
    spec: &TerrainSpec,
    trials: usize,
    seed: u64,
    cfg: &EpisodeConfig,
) -> Result<(EvalReport, Vec<Trajectory>), SimError> {
    let mut trajs = Vec::with_capacity(trials);
    for s in trial_seeds(seed, trials) {
        let t = match policy {
            EvalPolicy::Baseline => run_baseline_episode(spec, s, cfg)?,
            EvalPolicy::Agent { agent, z_demo } => {
                let mut p = agent.policy(*z_demo, ActMode::Eval, s);
                run_episode(spec, s, &mut p, cfg, Source::Online)?
            }
            EvalPolicy::Scripted => run_episode(spec, s, &mut ScriptedPolicy::new(s), cfg, Source::Scripted)?,
            EvalPolicy::Zero => {
                let mut p: Box<dyn EpisodePolicy> = Box::new(|_: &_, _: &[_]| NormalizedAction::ZERO);
                run_episode(spec, s, p.as_mut(), cfg, Source::Online)?
            }
        };
        trajs.push(t);
    }
    Ok((EvalReport::from_trajectories(spec.name, policy_id, &trajs), trajs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub jamming_free_rate: f64,
}

/// 30 N to 110 N in 5 N steps.
pub fn default_thresholds() -> Vec<f64> {
    (0..=16).map(|k| 30.0 + 5.0 * k as f64).collect()
}

/// Fraction of trajectories whose max force stays at or below each threshold.
pub fn jamming_free_curve(max_forces: &[f64], thresholds: &[f64]) -> Result<Vec<CurvePoint>, EvalError> {
    if max_forces.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    let n = max_forces.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&th| CurvePoint {
            threshold: th,
            jamming_free_rate: max_forces.iter().filter(|f| **f <= th).count() as f64 / n,
        })
        .collect())
}

/// `a` at or above `b` at every point (same thresholds assumed).
pub fn curve_dominates(a: &[CurvePoint], b: &[CurvePoint]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.jamming_free_rate >= y.jamming_free_rate)
}

pub fn curve_is_monotone(c: &[CurvePoint]) -> bool {
    c.windows(2).all(|w| w[1].jamming_free_rate >= w[0].jamming_free_rate)
}
