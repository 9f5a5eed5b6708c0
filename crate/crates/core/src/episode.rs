//! Episodes, rewards, trajectories and datasets.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::sqrt;
use crate::primitive::{
    denormalize_action, execute_step, normalize_action, vertical_baseline_step, LimitState,
    NormalizedAction, StepSummary, ACTION_DIM, BASELINE_SPEED,
};
use crate::rng::{derive_seed, rng_from_seed, stream, SimRng};
use crate::terrain::{
    depth_of, make_terrain, sample_initial_contact, static_resistance, BucketState, ContactReading,
    SimConfig, SimError, TerrainGrid, TerrainKind, TerrainSpec,
};

pub const CONTEXT_DIM: usize = 9;
pub const SCHEMA_VERSION: u32 = 1;
/// Agent steps before an episode is cut off.
pub const MAX_STEPS: usize = 150;
/// Agent step period, seconds.
pub const AGENT_DT: f64 = 0.1;
/// Depth comparisons tolerate accumulated rounding of the inner integration.
const DEPTH_EPS: f64 = 1e-9;

/// Per-step context `(relative pose, velocity, force)`.
pub type Context = [f64; CONTEXT_DIM];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("cannot compute normalization statistics of an empty dataset")]
    Empty,
    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: u32, found: u32 },
    #[error("trajectory {index} references terrain {terrain} outside the terrain set")]
    TerrainNotInSet { index: usize, terrain: TerrainKind },
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub w1: f64,
    pub w2: f64,
    pub d_target: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams { w1: 400.0, w2: 0.0004, d_target: 0.05 }
    }
}

/// `-w1 (d_target - d)^2 - w2 |F|^2`, with depth clamped at the target.
pub fn compute_reward(depth: f64, force: &ContactReading, rp: &RewardParams) -> f64 {
    let d = depth.max(0.0).min(rp.d_target);
    let gap = rp.d_target - d;
    let f2 = force.fx * force.fx + force.fz * force.fz + force.mpitch * force.mpitch;
    -rp.w1 * gap * gap - rp.w2 * f2
}

/// Demonstration generator: every component i.i.d. uniform on `[-1, 1]`.
pub fn scripted_policy(rng: &mut SimRng) -> NormalizedAction {
    let mut a = [0.0; ACTION_DIM];
    for v in a.iter_mut() {
        *v = rng.random_range(-1.0..=1.0);
    }
    NormalizedAction(a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Jam,
    Timeout,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::Jam => "jam",
            Outcome::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Scripted,
    Teleop,
    /// Collected online by a learned policy.
    Online,
    Baseline,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Scripted => "scripted",
            Source::Teleop => "teleop",
            Source::Online => "online",
            Source::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Context observed before the action.
    pub c: Context,
    pub a: NormalizedAction,
    pub r: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub terrain: TerrainKind,
    pub seed: u64,
    pub source: Source,
    pub outcome: Outcome,
    pub max_force: f64,
    pub transitions: Vec<Transition>,
    /// Context after the last action; the successor of the final transition.
    pub final_c: Context,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Undiscounted reward sum.
    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.r).sum()
    }

    /// Observed contexts in order, including the final one.
    pub fn contexts(&self) -> Vec<Context> {
        let mut out: Vec<Context> = self.transitions.iter().map(|t| t.c).collect();
        out.push(self.final_c);
        out
    }

    /// Context of transition `i`'s successor.
    pub fn next_context(&self, i: usize) -> &Context {
        self.transitions.get(i + 1).map_or(&self.final_c, |t| &t.c)
    }
}

/// Per-dimension statistics of the context part of the observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-6;

impl NormStats {
    /// Statistics over every transition context of `trajectories`.
    ///
    /// Values are sorted per dimension before summation, so the result does
    /// not depend on trajectory order.
    pub fn compute(trajectories: &[Trajectory]) -> Result<NormStats, DatasetError> {
        let n: usize = trajectories.iter().map(|t| t.transitions.len()).sum();
        if n == 0 {
            return Err(DatasetError::Empty);
        }
        let mut mean = vec![0.0; CONTEXT_DIM];
        let mut std = vec![0.0; CONTEXT_DIM];
        let mut column = Vec::with_capacity(n);
        for d in 0..CONTEXT_DIM {
            column.clear();
            column.extend(trajectories.iter().flat_map(|t| t.transitions.iter().map(move |tr| tr.c[d])));
            column.sort_by(f64::total_cmp);
            let m = column.iter().sum::<f64>() / n as f64;
            let mut dev: Vec<f64> = column.iter().map(|v| (v - m) * (v - m)).collect();
            dev.sort_by(f64::total_cmp);
            let var = dev.iter().sum::<f64>() / n as f64;
            mean[d] = m;
            std[d] = sqrt(var).max(STD_FLOOR);
        }
        Ok(NormStats { obs_mean: mean, obs_std: std })
    }

    pub fn normalize(&self, c: &Context) -> Context {
        let mut out = [0.0; CONTEXT_DIM];
        for i in 0..CONTEXT_DIM {
            out[i] = (c[i] - self.obs_mean[i]) / self.obs_std[i];
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema_version: u32,
    pub terrains: BTreeSet<TerrainKind>,
    pub norm_stats: Option<NormStats>,
    pub reward: RewardParams,
    /// Episode seeds in collection order.
    pub seeds: Vec<u64>,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(reward: RewardParams) -> Self {
        Dataset {
            schema_version: SCHEMA_VERSION,
            terrains: BTreeSet::new(),
            norm_stats: None,
            reward,
            seeds: Vec::new(),
            trajectories: Vec::new(),
        }
    }

    pub fn push(&mut self, traj: Trajectory) {
        self.terrains.insert(traj.terrain);
        self.seeds.push(traj.seed);
        self.trajectories.push(traj);
    }

    pub fn transition_count(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    pub fn recompute_stats(&mut self) -> Result<&NormStats, DatasetError> {
        self.norm_stats = Some(NormStats::compute(&self.trajectories)?);
        Ok(self.norm_stats.as_ref().unwrap())
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(DatasetError::SchemaMismatch { expected: SCHEMA_VERSION, found: self.schema_version });
        }
        for (index, t) in self.trajectories.iter().enumerate() {
            if !self.terrains.contains(&t.terrain) {
                return Err(DatasetError::TerrainNotInSet { index, terrain: t.terrain });
            }
        }
        Ok(())
    }

    /// Trajectories recorded on `terrain`, in dataset order.
    pub fn of_terrain(&self, terrain: TerrainKind) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter().filter(move |t| t.terrain == terrain)
    }

    /// Sub-dataset restricted to one terrain, statistics recomputed.
    pub fn filter_terrain(&self, terrain: TerrainKind) -> Result<Dataset, DatasetError> {
        let mut ds = Dataset::new(self.reward);
        for t in self.of_terrain(terrain) {
            ds.push(t.clone());
        }
        ds.recompute_stats()?;
        Ok(ds)
    }
}

/// Concatenates datasets and recomputes statistics over the union.
pub fn merge_datasets(parts: &[Dataset]) -> Result<Dataset, DatasetError> {
    let first = parts.first().ok_or(DatasetError::Empty)?;
    let mut out = Dataset::new(first.reward);
    for p in parts {
        if p.schema_version != SCHEMA_VERSION {
            return Err(DatasetError::SchemaMismatch { expected: SCHEMA_VERSION, found: p.schema_version });
        }
        out.terrains.extend(p.terrains.iter().copied());
        out.seeds.extend_from_slice(&p.seeds);
        out.trajectories.extend(p.trajectories.iter().cloned());
    }
    out.recompute_stats()?;
    Ok(out)
}

/// Settings shared by every episode runner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub sim: SimConfig,
    pub reward: RewardParams,
    pub max_steps: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { sim: SimConfig::default(), reward: RewardParams::default(), max_steps: MAX_STEPS }
    }
}

/// Anything that maps the running context history to an action.
pub trait EpisodePolicy {
    /// `current` is the latest context; `history` holds the earlier ones.
    fn act(&mut self, current: &Context, history: &[Context]) -> NormalizedAction;
}

impl<F: FnMut(&Context, &[Context]) -> NormalizedAction> EpisodePolicy for F {
    fn act(&mut self, current: &Context, history: &[Context]) -> NormalizedAction {
        self(current, history)
    }
}

/// Uniform-parameter demonstrator with its own seeded stream.
pub struct ScriptedPolicy {
    rng: SimRng,
}

impl ScriptedPolicy {
    pub fn new(seed: u64) -> Self {
        ScriptedPolicy { rng: rng_from_seed(derive_seed(seed, stream::SCRIPTED)) }
    }
}

impl EpisodePolicy for ScriptedPolicy {
    fn act(&mut self, _current: &Context, _history: &[Context]) -> NormalizedAction {
        scripted_policy(&mut self.rng)
    }
}

/// Result of one agent step inside an [`Episode`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub reward: f64,
    pub depth: f64,
    pub summary: StepSummary,
    pub done: Option<Outcome>,
}

/// Stateful episode runner. The teleop service and [`run_episode`] share it,
/// so both produce identical trajectories for identical seeds and actions.
#[derive(Debug, Clone)]
pub struct Episode {
    pub terrain: TerrainKind,
    pub seed: u64,
    cfg: EpisodeConfig,
    grid: TerrainGrid,
    bucket: BucketState,
    limits: LimitState,
    start: BucketState,
    current: Context,
    history: Vec<Context>,
    transitions: Vec<Transition>,
    max_force: f64,
    outcome: Option<Outcome>,
}

impl Episode {
    pub fn new(spec: &TerrainSpec, seed: u64, cfg: &EpisodeConfig) -> Result<Self, SimError> {
        cfg.sim.validate()?;
        let grid = make_terrain(spec, seed)?;
        let mut rng = rng_from_seed(derive_seed(seed, stream::CONTACT));
        let bucket = sample_initial_contact(&grid, &mut rng, &cfg.sim)?;
        let initial_force = static_resistance(&grid, &bucket, &cfg.sim);
        let mut current = [0.0; CONTEXT_DIM];
        current[7] = initial_force;
        Ok(Episode {
            terrain: spec.name,
            seed,
            cfg: *cfg,
            grid,
            bucket,
            limits: LimitState::default(),
            start: bucket,
            current,
            history: Vec::new(),
            transitions: Vec::new(),
            max_force: 0.0,
            outcome: None,
        })
    }

    pub fn context(&self) -> &Context {
        &self.current
    }

    pub fn history(&self) -> &[Context] {
        &self.history
    }

    pub fn bucket(&self) -> &BucketState {
        &self.bucket
    }

    pub fn grid(&self) -> &TerrainGrid {
        &self.grid
    }

    pub fn steps(&self) -> usize {
        self.transitions.len()
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.outcome
    }

    pub fn depth(&self) -> f64 {
        depth_of(&self.bucket, &self.grid)
    }

    pub fn reward_sum(&self) -> f64 {
        self.transitions.iter().map(|t| t.r).sum()
    }

    /// Executes `action` through the primitives.
    pub fn step(&mut self, action: NormalizedAction) -> Result<StepRecord, SimError> {
        let params = denormalize_action(&action);
        self.advance(action, |ep| {
            execute_step(&params, &ep.bucket, &mut ep.grid, &ep.limits, &ep.cfg.sim)
                .map(|(b, l, s)| (b, Some(l), s))
        })
    }

    /// Executes one step of the fixed vertical-downward trajectory.
    pub fn step_baseline(&mut self) -> Result<StepRecord, SimError> {
        let mut p = denormalize_action(&NormalizedAction::ZERO);
        p.v_z = -BASELINE_SPEED;
        let (action, _) = normalize_action(&p);
        self.advance(action, |ep| {
            vertical_baseline_step(&ep.bucket, &mut ep.grid, &ep.cfg.sim).map(|(b, s)| (b, None, s))
        })
    }

    fn advance<F>(&mut self, action: NormalizedAction, run: F) -> Result<StepRecord, SimError>
    where
        F: FnOnce(&mut Self) -> Result<(BucketState, Option<LimitState>, StepSummary), SimError>,
    {
        if self.outcome.is_some() || self.bucket.halted {
            return Err(SimError::Halted);
        }
        let before = self.bucket;
        let (bucket, limits, summary) = run(self)?;
        self.bucket = bucket;
        if let Some(l) = limits {
            self.limits = l;
        }
        let depth = depth_of(&self.bucket, &self.grid);
        let mean = ContactReading { fx: summary.mean_force[0], fz: summary.mean_force[1], mpitch: summary.mean_force[2] };
        let reward = compute_reward(depth, &mean, &self.cfg.reward);
        self.max_force = self.max_force.max(summary.peak());

        let step = self.transitions.len() + 1;
        let done = if summary.halted {
            Some(Outcome::Jam)
        } else if depth >= self.cfg.reward.d_target - DEPTH_EPS {
            Some(Outcome::Success)
        } else if step >= self.cfg.max_steps {
            Some(Outcome::Timeout)
        } else {
            None
        };
        let terminal = matches!(done, Some(Outcome::Jam | Outcome::Success));
        self.transitions.push(Transition { c: self.current, a: action, r: reward, done: terminal });

        let elapsed = summary.inner_steps.max(1) as f64 * self.cfg.sim.dt_inner;
        let next = [
            self.bucket.x - self.start.x,
            self.bucket.z - self.start.z,
            self.bucket.pitch - self.start.pitch,
            (self.bucket.x - before.x) / elapsed,
            (self.bucket.z - before.z) / elapsed,
            (self.bucket.pitch - before.pitch) / elapsed,
            summary.mean_force[0],
            summary.mean_force[1],
            summary.mean_force[2],
        ];
        self.history.push(self.current);
        self.current = next;
        self.outcome = done;
        Ok(StepRecord { step, reward, depth, summary, done })
    }

    pub fn into_trajectory(self, source: Source) -> Trajectory {
        Trajectory {
            terrain: self.terrain,
            seed: self.seed,
            source,
            outcome: self.outcome.unwrap_or(Outcome::Timeout),
            max_force: self.max_force,
            transitions: self.transitions,
            final_c: self.current,
        }
    }
}

/// Runs one full episode of `policy` on a fresh bed seeded by `seed`.
pub fn run_episode(
    spec: &TerrainSpec,
    seed: u64,
    policy: &mut dyn EpisodePolicy,
    cfg: &EpisodeConfig,
    source: Source,
) -> Result<Trajectory, SimError> {
    let mut ep = Episode::new(spec, seed, cfg)?;
    while ep.outcome().is_none() {
        let a = policy.act(&ep.current, &ep.history);
        ep.step(a)?;
    }
    Ok(ep.into_trajectory(source))
}

/// Runs the vertical-downward baseline until success, jam or timeout.
pub fn run_baseline_episode(spec: &TerrainSpec, seed: u64, cfg: &EpisodeConfig) -> Result<Trajectory, SimError> {
    let mut ep = Episode::new(spec, seed, cfg)?;
    while ep.outcome().is_none() {
        ep.step_baseline()?;
    }
    Ok(ep.into_trajectory(Source::Baseline))
}

/// Collects `seeds.len()` scripted episodes, one freshly seeded bed each.
pub fn collect_dataset(spec: &TerrainSpec, seeds: &[u64], cfg: &EpisodeConfig) -> Result<Dataset, DatasetError> {
    let mut ds = Dataset::new(cfg.reward);
    ds.terrains.insert(spec.name);
    for &seed in seeds {
        let mut policy = ScriptedPolicy::new(seed);
        ds.push(run_episode(spec, seed, &mut policy, cfg, Source::Scripted)?);
    }
    if !ds.trajectories.is_empty() {
        ds.recompute_stats()?;
    }
    Ok(ds)
}

/// `n` episode seeds derived from `base`.
pub fn episode_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| derive_seed(base, 1000 + i)).collect()
}
