//! Implicit Q-learning, the behavioral-cloning baseline, observation assembly
//! and the policy adapter used for rollouts.

pub mod chain;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_demo, EncoderParams, IncrementalEncoder, LatentZ, LATENT_DIM};
use crate::episode::{run_episode, Context, Dataset, EpisodeConfig, NormStats, Source, Trajectory, CONTEXT_DIM};
use crate::math;
use crate::nn::{mlp_forward, mlp_forward_tape, mlp_init, AdamState, NnError, ParamSet, Tape, Tensor, Var};
use crate::primitive::{NormalizedAction, ACTION_DIM};
use crate::rng::{derive_seed, rng_from_seed, stream, SimRng};
use crate::terrain::{TerrainKind, TerrainSpec};

pub const OBS_DIM: usize = CONTEXT_DIM + 2 * LATENT_DIM;
pub type Observation = [f64; OBS_DIM];

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Trajectories per terrain pooled into `z_demo`.
pub const DEMO_TRAJECTORIES: usize = 10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IqlError {
    #[error("dataset has no transitions")]
    Empty,
    #[error("normalization statistics missing")]
    MissingStats,
    #[error("no demonstration latent for terrain {0}")]
    MissingDemo(String),
    #[error("invalid hyperparameter: {0}")]
    Hyper(String),
    #[error("training diverged at step {step}: {what}")]
    NonFinite { step: u64, what: String },
    #[error("checkpoint has no critics")]
    NoCritics,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error(transparent)]
    Sim(#[from] crate::terrain::SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IqlHyper {
    pub gamma: f64,
    pub expectile_tau: f64,
    pub awr_beta: f64,
    pub weight_clip: f64,
    pub lr: f64,
    pub batch: usize,
    pub target_soft_update: f64,
    pub gradient_steps: usize,
    pub hidden: usize,
}

impl Default for IqlHyper {
    fn default() -> Self {
        IqlHyper {
            gamma: 0.99,
            expectile_tau: 0.7,
            awr_beta: 3.0,
            weight_clip: 100.0,
            lr: 3e-4,
            batch: 256,
            target_soft_update: 0.005,
            gradient_steps: 5_000,
            hidden: 256,
        }
    }
}

impl IqlHyper {
    pub fn validate(&self) -> Result<(), IqlError> {
        let bad = |what: &str| Err(IqlError::Hyper(String::from(what)));
        if !(self.expectile_tau > 0.5 && self.expectile_tau < 1.0) {
            return bad("expectile_tau must lie in (0.5, 1)");
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.awr_beta > 0.0 && self.weight_clip > 0.0 && self.lr > 0.0) {
            return bad("awr_beta, weight_clip and lr must be positive");
        }
        if !(self.target_soft_update > 0.0 && self.target_soft_update <= 1.0) {
            return bad("target_soft_update must lie in (0, 1]");
        }
        if self.batch == 0 || self.hidden == 0 {
            return bad("batch and hidden must be positive");
        }
        Ok(())
    }
}

/// `|tau - 1(u < 0)| * u^2`.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    w * u * u
}

/// Minimizer of the summed expectile loss over `samples`, by iteratively
/// reweighted least squares (terminates once the weight pattern is stable).
pub fn expectile(samples: &[f64], tau: f64) -> f64 {
    assert!(!samples.is_empty(), "expectile of an empty sample");
    let mut m = samples.iter().sum::<f64>() / samples.len() as f64;
    for _ in 0..200 {
        let (mut num, mut den) = (0.0, 0.0);
        for &x in samples {
            let w = if x < m { 1.0 - tau } else { tau };
            num += w * x;
            den += w;
        }
        let next = num / den;
        if next == m {
            break;
        }
        m = next;
    }
    m
}

/// Flat transition store sampled uniformly with replacement.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OfflineData {
    pub obs_dim: usize,
    pub act_dim: usize,
    obs: Vec<f64>,
    act: Vec<f64>,
    rew: Vec<f64>,
    next_obs: Vec<f64>,
    not_done: Vec<f64>,
}

pub struct Batch {
    pub obs: Tensor,
    pub act: Tensor,
    pub rew: Tensor,
    pub next_obs: Tensor,
    pub not_done: Tensor,
}

impl OfflineData {
    pub fn new(obs_dim: usize, act_dim: usize) -> Self {
        OfflineData { obs_dim, act_dim, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.rew.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rew.is_empty()
    }

    pub fn push(&mut self, obs: &[f64], act: &[f64], rew: f64, next_obs: &[f64], done: bool) {
        assert_eq!(obs.len(), self.obs_dim, "observation width");
        assert_eq!(next_obs.len(), self.obs_dim, "next observation width");
        assert_eq!(act.len(), self.act_dim, "action width");
        self.obs.extend_from_slice(obs);
        self.act.extend_from_slice(act);
        self.rew.push(rew);
        self.next_obs.extend_from_slice(next_obs);
        self.not_done.push(if done { 0.0 } else { 1.0 });
    }

    pub fn obs(&self, i: usize) -> &[f64] {
        &self.obs[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn act(&self, i: usize) -> &[f64] {
        &self.act[i * self.act_dim..(i + 1) * self.act_dim]
    }

    pub fn reward(&self, i: usize) -> f64 {
        self.rew[i]
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        let b = idx.len();
        let (od, ad) = (self.obs_dim, self.act_dim);
        let mut batch = Batch {
            obs: Tensor::zeros(b, od),
            act: Tensor::zeros(b, ad),
            rew: Tensor::zeros(b, 1),
            next_obs: Tensor::zeros(b, od),
            not_done: Tensor::zeros(b, 1),
        };
        for (r, &i) in idx.iter().enumerate() {
            batch.obs.row_mut(r).copy_from_slice(self.obs(i));
            batch.act.row_mut(r).copy_from_slice(self.act(i));
            batch.next_obs.row_mut(r).copy_from_slice(&self.next_obs[i * od..(i + 1) * od]);
            batch.rew.data[r] = self.rew[i];
            batch.not_done.data[r] = self.not_done[i];
        }
        batch
    }

    pub fn sample(&self, rng: &mut SimRng, n: usize) -> Batch {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.len())).collect();
        self.gather(&idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Iql,
    Bc,
}

impl Algo {
    pub fn as_str(self) -> &'static str {
        match self {
            Algo::Iql => "iql",
            Algo::Bc => "bc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    Eval,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critics {
    pub q1: ParamSet,
    pub q2: ParamSet,
    pub q1_target: ParamSet,
    pub q2_target: ParamSet,
    pub v: ParamSet,
}

/// Network parameters of a trained agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub algo: Algo,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub critics: Option<Critics>,
    /// Two-layer MLP (`l1.*`, `l2.*`) followed by `log_std`.
    pub policy: ParamSet,
    pub hyper: IqlHyper,
    pub seed: u64,
    pub steps: u64,
}

fn policy_init(obs_dim: usize, act_dim: usize, hidden: usize, rng: &mut SimRng) -> ParamSet {
    let mut p = mlp_init(obs_dim, hidden, act_dim, rng);
    p.push("log_std", Tensor::zeros(1, act_dim));
    p
}

impl AgentCheckpoint {
    pub fn init(algo: Algo, obs_dim: usize, act_dim: usize, hyper: IqlHyper, seed: u64) -> Self {
        let mut rng = rng_from_seed(derive_seed(seed, stream::INIT));
        let policy = policy_init(obs_dim, act_dim, hyper.hidden, &mut rng);
        let critics = (algo == Algo::Iql).then(|| {
            let q1 = mlp_init(obs_dim + act_dim, hyper.hidden, 1, &mut rng);
            let q2 = mlp_init(obs_dim + act_dim, hyper.hidden, 1, &mut rng);
            let v = mlp_init(obs_dim, hyper.hidden, 1, &mut rng);
            Critics { q1_target: q1.clone(), q2_target: q2.clone(), q1, q2, v }
        });
        AgentCheckpoint { algo, obs_dim, act_dim, critics, policy, hyper, seed, steps: 0 }
    }

    pub fn policy_mean(&self, obs: &Tensor) -> Result<Tensor, NnError> {
        Ok(mlp_forward(&self.policy.tensors[..4], obs)?.map(math::tanh))
    }

    pub fn log_std(&self) -> Vec<f64> {
        self.policy.tensors[4].data.iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect()
    }

    /// Tanh-bounded mean (`Eval`) or a clamped Gaussian draw (`Sample`).
    pub fn act(&self, obs: &[f64], mode: ActMode, rng: &mut SimRng) -> Vec<f64> {
        let mean = self.policy_mean(&Tensor::row_vector(obs)).expect("observation width").data;
        match mode {
            ActMode::Eval => mean,
            ActMode::Sample => mean
                .iter()
                .zip(self.log_std())
                .map(|(m, ls)| {
                    let n: f64 = StandardNormal.sample(rng);
                    (m + math::exp(ls) * n).clamp(-1.0, 1.0)
                })
                .collect(),
        }
    }

    /// `(Q1, Q2, V)` at one state-action pair.
    pub fn values(&self, obs: &[f64], act: &[f64]) -> Result<(f64, f64, f64), IqlError> {
        let c = self.critics.as_ref().ok_or(IqlError::NoCritics)?;
        let sa = Tensor::concat_cols(&[&Tensor::row_vector(obs), &Tensor::row_vector(act)]);
        let q1 = mlp_forward(&c.q1.tensors, &sa)?.item();
        let q2 = mlp_forward(&c.q2.tensors, &sa)?.item();
        let v = mlp_forward(&c.v.tensors, &Tensor::row_vector(obs))?.item();
        Ok((q1, q2, v))
    }

    pub fn checksum(&self) -> u64 {
        let mut h = self.policy.checksum();
        if let Some(c) = &self.critics {
            for p in [&c.q1, &c.q2, &c.q1_target, &c.q2_target, &c.v] {
                h = crate::rng::mix(h ^ p.checksum());
            }
        }
        h
    }

    pub fn is_finite(&self) -> bool {
        self.policy.is_finite()
            && self.critics.as_ref().is_none_or(|c| {
                [&c.q1, &c.q2, &c.q1_target, &c.q2_target, &c.v].iter().all(|p| p.is_finite())
            })
    }
}

/// Losses and AWR weight range of one gradient step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub v_loss: f64,
    pub q_loss: f64,
    pub pi_loss: f64,
    pub weight_min: f64,
    pub weight_max: f64,
}

fn grads_of(params: &ParamSet, tape: &Tape, vars: &[Var], loss: Var, step: u64, what: &str) -> Result<Vec<Tensor>, IqlError> {
    let lv = tape.value(loss).item();
    if !lv.is_finite() {
        return Err(IqlError::NonFinite { step, what: format!("{what} loss = {lv}") });
    }
    let mut g = tape.backward(loss)?;
    let grads = params.collect_grads(&mut g, vars);
    if grads.iter().any(|t| !t.is_finite()) {
        return Err(IqlError::NonFinite { step, what: format!("{what} gradient") });
    }
    Ok(grads)
}

/// Gaussian log-density of `act` under the policy, as a `B x 1` column.
fn log_prob_tape(tape: &mut Tape, pv: &[Var], obs: Var, act: Var) -> Var {
    let pre = mlp_forward_tape(tape, &pv[..4], obs);
    let mean = tape.tanh(pre);
    let b = tape.value(obs).rows;
    let act_dim = tape.value(mean).cols;
    let ls = tape.clamp(pv[4], LOG_STD_MIN, LOG_STD_MAX);
    let neg = tape.scale(ls, -1.0);
    let inv_std = tape.exp(neg);
    let inv_rep = tape.repeat_rows(inv_std, b);
    let diff = tape.sub(act, mean);
    let z = tape.mul(diff, inv_rep);
    let zz = tape.square(z);
    let quad = tape.sum_cols(zz);
    let quad = tape.scale(quad, -0.5);
    let ls_sum = tape.sum(ls);
    let ls_rep = tape.repeat_rows(ls_sum, b);
    let lp = tape.sub(quad, ls_rep);
    tape.offset(lp, -0.5 * act_dim as f64 * math::ln(2.0 * core::f64::consts::PI))
}

/// Stateful optimizer over an [`AgentCheckpoint`].
pub struct Trainer {
    pub ckpt: AgentCheckpoint,
    adam_pi: AdamState,
    adam_critics: Option<[AdamState; 3]>,
    rng: SimRng,
}

impl Trainer {
    pub fn new(ckpt: AgentCheckpoint, seed: u64) -> Self {
        let lr = ckpt.hyper.lr;
        let adam_pi = AdamState::new(&ckpt.policy, lr);
        let adam_critics = ckpt
            .critics
            .as_ref()
            .map(|c| [AdamState::new(&c.q1, lr), AdamState::new(&c.q2, lr), AdamState::new(&c.v, lr)]);
        Trainer { ckpt, adam_pi, adam_critics, rng: rng_from_seed(derive_seed(seed, stream::BATCH)) }
    }

    pub fn step(&mut self, data: &OfflineData) -> Result<StepStats, IqlError> {
        let batch = data.sample(&mut self.rng, self.ckpt.hyper.batch);
        let stats = match self.ckpt.algo {
            Algo::Iql => self.iql_step(&batch)?,
            Algo::Bc => self.bc_step(&batch)?,
        };
        self.ckpt.steps += 1;
        Ok(stats)
    }

    fn bc_step(&mut self, batch: &Batch) -> Result<StepStats, IqlError> {
        let step = self.ckpt.steps;
        let mut tape = Tape::new();
        let pv = self.ckpt.policy.on_tape(&mut tape);
        let obs = tape.constant(batch.obs.clone());
        let act = tape.constant(batch.act.clone());
        let pre = mlp_forward_tape(&mut tape, &pv[..4], obs);
        let mean = tape.tanh(pre);
        let d = tape.sub(mean, act);
        let sq = tape.square(d);
        let loss = tape.mean(sq);
        let grads = grads_of(&self.ckpt.policy, &tape, &pv, loss, step, "bc")?;
        self.adam_pi.update(&mut self.ckpt.policy, &grads);
        Ok(StepStats { pi_loss: tape.value(loss).item(), weight_min: 1.0, weight_max: 1.0, ..Default::default() })
    }

    fn iql_step(&mut self, batch: &Batch) -> Result<StepStats, IqlError> {
        let step = self.ckpt.steps;
        let h = self.ckpt.hyper;
        let c = self.ckpt.critics.as_mut().ok_or(IqlError::NoCritics)?;
        let adam = self.adam_critics.as_mut().ok_or(IqlError::NoCritics)?;
        let b = batch.obs.rows;
        let sa = Tensor::concat_cols(&[&batch.obs, &batch.act]);

        let tq1 = mlp_forward(&c.q1_target.tensors, &sa)?;
        let tq2 = mlp_forward(&c.q2_target.tensors, &sa)?;
        let target_q = tq1.zip_map(&tq2, f64::min);

        // value: expectile regression onto the target critics
        let v_loss = {
            let mut tape = Tape::new();
            let vv = c.v.on_tape(&mut tape);
            let obs = tape.constant(batch.obs.clone());
            let v = mlp_forward_tape(&mut tape, &vv, obs);
            let u_val = target_q.zip_map(tape.value(v), |q, v| q - v);
            let w = u_val.map(|u| if u < 0.0 { 1.0 - h.expectile_tau } else { h.expectile_tau });
            let tq = tape.constant(target_q.clone());
            let u = tape.sub(tq, v);
            let sq = tape.square(u);
            let wv = tape.constant(w);
            let weighted = tape.mul(sq, wv);
            let loss = tape.mean(weighted);
            let grads = grads_of(&c.v, &tape, &vv, loss, step, "value")?;
            adam[2].update(&mut c.v, &grads);
            tape.value(loss).item()
        };

        // critics: TD regression onto r + gamma * V(s')
        let q_loss = {
            let next_v = mlp_forward(&c.v.tensors, &batch.next_obs)?;
            let mut y = Tensor::zeros(b, 1);
            for r in 0..b {
                y.data[r] = batch.rew.data[r] + h.gamma * batch.not_done.data[r] * next_v.data[r];
            }
            let mut tape = Tape::new();
            let q1v = c.q1.on_tape(&mut tape);
            let q2v = c.q2.on_tape(&mut tape);
            let x = tape.constant(sa.clone());
            let yv = tape.constant(y);
            let q1 = mlp_forward_tape(&mut tape, &q1v, x);
            let q2 = mlp_forward_tape(&mut tape, &q2v, x);
            let d1 = tape.sub(q1, yv);
            let d2 = tape.sub(q2, yv);
            let s1 = tape.square(d1);
            let s2 = tape.square(d2);
            let l1 = tape.mean(s1);
            let l2 = tape.mean(s2);
            let loss = tape.add(l1, l2);
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(IqlError::NonFinite { step, what: format!("critic loss = {lv}") });
            }
            let mut g = tape.backward(loss)?;
            let g1 = c.q1.collect_grads(&mut g, &q1v);
            let g2 = c.q2.collect_grads(&mut g, &q2v);
            if g1.iter().chain(&g2).any(|t| !t.is_finite()) {
                return Err(IqlError::NonFinite { step, what: String::from("critic gradient") });
            }
            adam[0].update(&mut c.q1, &g1);
            adam[1].update(&mut c.q2, &g2);
            lv
        };

        // policy: advantage-weighted log-likelihood
        let v_now = mlp_forward(&c.v.tensors, &batch.obs)?;
        let weights = target_q.zip_map(&v_now, |q, v| {
            math::exp((h.awr_beta * (q - v)).max(-700.0)).min(h.weight_clip)
        });
        let (wmin, wmax) = weights.data.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), w| (lo.min(*w), hi.max(*w)));
        let pi_loss = {
            let mut tape = Tape::new();
            let pv = self.ckpt.policy.on_tape(&mut tape);
            let obs = tape.constant(batch.obs.clone());
            let act = tape.constant(batch.act.clone());
            let lp = log_prob_tape(&mut tape, &pv, obs, act);
            let w = tape.constant(weights);
            let wl = tape.mul(lp, w);
            let m = tape.mean(wl);
            let loss = tape.scale(m, -1.0);
            let grads = grads_of(&self.ckpt.policy, &tape, &pv, loss, step, "policy")?;
            self.adam_pi.update(&mut self.ckpt.policy, &grads);
            tape.value(loss).item()
        };

        c.q1_target.soft_update_from(&c.q1, h.target_soft_update);
        c.q2_target.soft_update_from(&c.q2, h.target_soft_update);
        Ok(StepStats { v_loss, q_loss, pi_loss, weight_min: wmin, weight_max: wmax })
    }
}

/// Runs `hyper.gradient_steps` steps of `algo` on `data`.
pub fn train_on(data: &OfflineData, algo: Algo, hyper: &IqlHyper, seed: u64) -> Result<AgentCheckpoint, IqlError> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(IqlError::Empty);
    }
    let ckpt = AgentCheckpoint::init(algo, data.obs_dim, data.act_dim, *hyper, seed);
    let mut t = Trainer::new(ckpt, seed);
    for _ in 0..hyper.gradient_steps {
        t.step(data)?;
    }
    Ok(t.ckpt)
}

/// The frozen encoder pair shared by every agent trained on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderPair {
    pub current: EncoderParams,
    pub demo: EncoderParams,
}

/// `[normalized c | z_t | z_demo]`.
pub fn build_observation(
    c: &Context,
    prefix: &[Context],
    current: &EncoderParams,
    z_demo: &LatentZ,
    norm: Option<&NormStats>,
) -> Result<Observation, IqlError> {
    let norm = norm.ok_or(IqlError::MissingStats)?;
    Ok(assemble(c, &current.encode(prefix), z_demo, norm))
}

fn assemble(c: &Context, z_t: &LatentZ, z_demo: &LatentZ, norm: &NormStats) -> Observation {
    let mut o = [0.0; OBS_DIM];
    o[..CONTEXT_DIM].copy_from_slice(&norm.normalize(c));
    o[CONTEXT_DIM..CONTEXT_DIM + LATENT_DIM].copy_from_slice(z_t);
    o[CONTEXT_DIM + LATENT_DIM..].copy_from_slice(z_demo);
    o
}

/// `z_demo` of each terrain in `ds`, pooled over its first `k` trajectories.
pub fn demo_latents(ds: &Dataset, demo: &EncoderParams, k: usize) -> Result<BTreeMap<TerrainKind, LatentZ>, IqlError> {
    let mut out = BTreeMap::new();
    for &t in &ds.terrains {
        let trajs: Vec<&Trajectory> = ds.of_terrain(t).take(k).collect();
        if trajs.is_empty() {
            continue;
        }
        out.insert(t, encode_demo(demo, &trajs)?);
    }
    Ok(out)
}

/// Appends the observation-level transitions of one trajectory.
pub fn push_trajectory(
    data: &mut OfflineData,
    traj: &Trajectory,
    current: &EncoderParams,
    z_demo: &LatentZ,
    norm: &NormStats,
    reward_scale: f64,
) {
    let mut inc = IncrementalEncoder::new(current);
    let mut z_prev = inc.latent();
    for (i, tr) in traj.transitions.iter().enumerate() {
        let obs = assemble(&tr.c, &z_prev, z_demo, norm);
        inc.push(&tr.c);
        let z_next = inc.latent();
        let next = assemble(traj.next_context(i), &z_next, z_demo, norm);
        data.push(&obs, &tr.a.0, tr.r * reward_scale, &next, tr.done);
        z_prev = z_next;
    }
}

pub fn build_offline_data(
    ds: &Dataset,
    current: &EncoderParams,
    z_demo: &BTreeMap<TerrainKind, LatentZ>,
    norm: &NormStats,
    reward_scale: f64,
) -> Result<OfflineData, IqlError> {
    let mut data = OfflineData::new(OBS_DIM, ACTION_DIM);
    for traj in &ds.trajectories {
        let z = z_demo.get(&traj.terrain).ok_or_else(|| IqlError::MissingDemo(String::from(traj.terrain.as_str())))?;
        push_trajectory(&mut data, traj, current, z, norm, reward_scale);
    }
    if data.is_empty() {
        return Err(IqlError::Empty);
    }
    Ok(data)
}

/// A trained policy together with everything needed to build observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub checkpoint: AgentCheckpoint,
    pub encoders: EncoderPair,
    pub norm: NormStats,
    /// `z_demo` of every terrain seen in training.
    pub demo_z: BTreeMap<TerrainKind, LatentZ>,
    /// Multiplier applied to rewards before critic training.
    pub reward_scale: f64,
}

/// `1000 / (max return - min return)` over the dataset's trajectories, so
/// advantages have a comparable spread whatever the terrain mix. 1 when all
/// returns coincide.
pub fn return_range_scale(ds: &Dataset) -> f64 {
    let returns: Vec<f64> = ds.trajectories.iter().map(|t| t.total_reward()).collect();
    let hi = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = returns.iter().copied().fold(f64::INFINITY, f64::min);
    if returns.is_empty() || hi - lo < 1e-9 {
        1.0
    } else {
        1000.0 / (hi - lo)
    }
}

fn train_agent(ds: &Dataset, enc: &EncoderPair, algo: Algo, hyper: &IqlHyper, seed: u64) -> Result<Agent, IqlError> {
    let norm = ds.norm_stats.clone().ok_or(IqlError::MissingStats)?;
    let demo_z = demo_latents(ds, &enc.demo, DEMO_TRAJECTORIES)?;
    let reward_scale = match algo {
        Algo::Iql => return_range_scale(ds),
        Algo::Bc => 1.0,
    };
    let data = build_offline_data(ds, &enc.current, &demo_z, &norm, reward_scale)?;
    let checkpoint = train_on(&data, algo, hyper, seed)?;
    Ok(Agent { checkpoint, encoders: enc.clone(), norm, demo_z, reward_scale })
}

pub fn train_iql(ds: &Dataset, enc: &EncoderPair, hyper: &IqlHyper, seed: u64) -> Result<Agent, IqlError> {
    train_agent(ds, enc, Algo::Iql, hyper, seed)
}

pub fn train_bc(ds: &Dataset, enc: &EncoderPair, hyper: &IqlHyper, seed: u64) -> Result<Agent, IqlError> {
    train_agent(ds, enc, Algo::Bc, hyper, seed)
}

impl Agent {
    /// `z_demo` from a fresh set of demonstrations (for unseen terrains).
    pub fn infer_demo_z(&self, demos: &[&Trajectory]) -> Result<LatentZ, IqlError> {
        Ok(encode_demo(&self.encoders.demo, demos)?)
    }

    pub fn policy(&self, z_demo: LatentZ, mode: ActMode, seed: u64) -> AgentPolicy<'_> {
        AgentPolicy {
            agent: self,
            z_demo,
            mode,
            rng: rng_from_seed(derive_seed(seed, stream::POLICY_SAMPLE)),
            inc: IncrementalEncoder::new(&self.encoders.current),
        }
    }

    pub fn observation(&self, c: &Context, prefix: &[Context], z_demo: &LatentZ) -> Observation {
        assemble(c, &self.encoders.current.encode(prefix), z_demo, &self.norm)
    }
}

/// Rollout adapter; keeps the `current` encoder state across steps.
pub struct AgentPolicy<'a> {
    agent: &'a Agent,
    z_demo: LatentZ,
    mode: ActMode,
    rng: SimRng,
    inc: IncrementalEncoder<'a>,
}

impl crate::episode::EpisodePolicy for AgentPolicy<'_> {
    fn act(&mut self, current: &Context, history: &[Context]) -> NormalizedAction {
        if history.len() < self.inc.len() {
            self.inc = IncrementalEncoder::new(&self.agent.encoders.current);
        }
        for c in &history[self.inc.len()..] {
            self.inc.push(c);
        }
        let obs = assemble(current, &self.inc.latent(), &self.z_demo, &self.agent.norm);
        let a = self.agent.checkpoint.act(&obs, self.mode, &mut self.rng);
        let mut arr = [0.0; ACTION_DIM];
        arr.copy_from_slice(&a);
        NormalizedAction::clamped(arr).0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub n_traj: usize,
    pub steps_per_traj: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { n_traj: 20, steps_per_traj: 100 }
    }
}

pub struct FinetuneResult {
    pub agent: Agent,
    /// `base` with the online trajectories appended.
    pub dataset: Dataset,
}

/// Alternates sample-mode collection on `spec` with IQL steps over the grown
/// dataset. Observations keep the agent's normalization, and `z_demo` is used
/// for every trajectory of the fine-tuning terrain.
pub fn finetune(
    agent: &Agent,
    base: &Dataset,
    spec: &TerrainSpec,
    z_demo: LatentZ,
    cfg: &FinetuneConfig,
    ep: &EpisodeConfig,
    seed: u64,
) -> Result<FinetuneResult, IqlError> {
    if agent.checkpoint.algo != Algo::Iql {
        return Err(IqlError::NoCritics);
    }
    let mut demo_z = agent.demo_z.clone();
    demo_z.insert(spec.name, z_demo);
    let mut dataset = base.clone();
    dataset.terrains.insert(spec.name);
    let mut out = agent.clone();
    if cfg.n_traj == 0 {
        return Ok(FinetuneResult { agent: out, dataset });
    }
    let mut data = OfflineData::new(OBS_DIM, ACTION_DIM);
    for traj in &base.trajectories {
        let z = demo_z.get(&traj.terrain).ok_or_else(|| IqlError::MissingDemo(String::from(traj.terrain.as_str())))?;
        push_trajectory(&mut data, traj, &agent.encoders.current, z, &agent.norm, agent.reward_scale);
    }
    let run_seed = derive_seed(seed, stream::FINETUNE);
    let mut trainer = Trainer::new(agent.checkpoint.clone(), run_seed);
    for k in 0..cfg.n_traj {
        let ep_seed = derive_seed(run_seed, 1000 + k as u64);
        out.checkpoint = trainer.ckpt.clone();
        let mut policy = out.policy(z_demo, ActMode::Sample, ep_seed);
        let traj = run_episode(spec, ep_seed, &mut policy, ep, Source::Online)?;
        push_trajectory(&mut data, &traj, &agent.encoders.current, &z_demo, &agent.norm, agent.reward_scale);
        dataset.push(traj);
        for _ in 0..cfg.steps_per_traj {
            trainer.step(&data)?;
        }
    }
    out.checkpoint = trainer.ckpt;
    out.demo_z = demo_z;
    Ok(FinetuneResult { agent: out, dataset })
}

#[cfg(test)]
mod tests;
