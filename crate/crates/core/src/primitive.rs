//! The `sweep`, `rotate` and `penetrate` primitives.
//!
//! One agent step holds the reference velocities for 100 inner controller
//! steps. The three primitives run simultaneously on their own axes and each
//! reverses (or lifts) when its force or displacement limit is crossed.

use serde::{Deserialize, Serialize};

use crate::terrain::{
    depth_of, sim_step, BucketState, SimConfig, SimError, TerrainGrid, VelocityCommand,
};

pub const ACTION_DIM: usize = 8;
/// Inner controller steps per agent step (1000 Hz inside 10 Hz).
pub const INNER_STEPS: usize = 100;
/// Upward speed while the penetrate primitive backs off a force limit, m/s.
pub const LIFT_SPEED: f64 = 0.02;
/// Descent speed of the vertical-downward baseline, m/s.
pub const BASELINE_SPEED: f64 = 0.02;

/// `(low, high)` of each action component, in action order.
pub const PARAM_RANGES: [(f64, f64); ACTION_DIM] = [
    (-0.1, 0.1),   // v_x, m/s
    (25.0, 40.0),  // f_lim_x, N
    (0.015, 0.03), // d_lim_x, m
    (-0.5, 0.5),   // w_pitch, rad/s
    (40.0, 70.0),  // m_lim_pitch, N m
    (0.1, 0.2),    // a_lim_pitch, rad
    (-0.03, 0.03), // v_z, m/s
    (40.0, 70.0),  // f_lim_z, N
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveParams {
    pub v_x: f64,
    pub f_lim_x: f64,
    pub d_lim_x: f64,
    pub w_pitch: f64,
    pub m_lim_pitch: f64,
    pub a_lim_pitch: f64,
    pub v_z: f64,
    pub f_lim_z: f64,
}

impl PrimitiveParams {
    pub fn to_array(&self) -> [f64; ACTION_DIM] {
        [
            self.v_x,
            self.f_lim_x,
            self.d_lim_x,
            self.w_pitch,
            self.m_lim_pitch,
            self.a_lim_pitch,
            self.v_z,
            self.f_lim_z,
        ]
    }

    pub fn from_array(a: [f64; ACTION_DIM]) -> Self {
        PrimitiveParams {
            v_x: a[0],
            f_lim_x: a[1],
            d_lim_x: a[2],
            w_pitch: a[3],
            m_lim_pitch: a[4],
            a_lim_pitch: a[5],
            v_z: a[6],
            f_lim_z: a[7],
        }
    }
}

/// Action in the normalized box `[-1, 1]^8`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NormalizedAction(pub [f64; ACTION_DIM]);

impl NormalizedAction {
    pub const ZERO: NormalizedAction = NormalizedAction([0.0; ACTION_DIM]);

    /// Clamps every component into `[-1, 1]`; NaN maps to 0. Returns whether
    /// anything changed.
    pub fn clamped(a: [f64; ACTION_DIM]) -> (NormalizedAction, bool) {
        let mut out = [0.0; ACTION_DIM];
        let mut changed = false;
        for (o, v) in out.iter_mut().zip(a) {
            let c = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
            changed |= c != v || v.is_nan();
            *o = c;
        }
        (NormalizedAction(out), changed)
    }
}

fn mid_half(i: usize) -> (f64, f64) {
    let (lo, hi) = PARAM_RANGES[i];
    (0.5 * (lo + hi), 0.5 * (hi - lo))
}

pub fn denormalize_action(a: &NormalizedAction) -> PrimitiveParams {
    let mut p = [0.0; ACTION_DIM];
    for (i, v) in p.iter_mut().enumerate() {
        let (mid, half) = mid_half(i);
        *v = mid + half * a.0[i].clamp(-1.0, 1.0);
    }
    PrimitiveParams::from_array(p)
}

/// Inverse of [`denormalize_action`]. Out-of-range fields are clamped and the
/// returned flag is set.
pub fn normalize_action(p: &PrimitiveParams) -> (NormalizedAction, bool) {
    let raw = p.to_array();
    let mut a = [0.0; ACTION_DIM];
    for (i, v) in a.iter_mut().enumerate() {
        let (mid, half) = mid_half(i);
        *v = (raw[i] - mid) / half;
    }
    NormalizedAction::clamped(a)
}

/// Reversal bookkeeping carried across agent steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitState {
    pub sweep_dir: f64,
    pub sweep_accum: f64,
    pub rotate_dir: f64,
    pub rotate_accum: f64,
    pub lifting: bool,
}

impl Default for LimitState {
    fn default() -> Self {
        LimitState { sweep_dir: 1.0, sweep_accum: 0.0, rotate_dir: 1.0, rotate_accum: 0.0, lifting: false }
    }
}

/// Aggregates of one agent step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepSummary {
    /// Mean of `|fx|, |fz|, |mpitch|` over the executed inner steps.
    pub mean_force: [f64; 3],
    /// Max of `|fx|, |fz|, |mpitch|` over the executed inner steps.
    pub max_force: [f64; 3],
    pub end_depth: f64,
    pub halted: bool,
    pub inner_steps: usize,
}

impl StepSummary {
    /// Largest force component magnitude seen during the step.
    pub fn peak(&self) -> f64 {
        self.max_force.iter().fold(0.0, |m: f64, v| m.max(*v))
    }
}

#[derive(Default)]
struct ForceAccumulator {
    sum: [f64; 3],
    max: [f64; 3],
    n: usize,
}

impl ForceAccumulator {
    fn push(&mut self, f: [f64; 3]) {
        for i in 0..3 {
            let v = libm::fabs(f[i]);
            self.sum[i] += v;
            self.max[i] = self.max[i].max(v);
        }
        self.n += 1;
    }

    fn finish(self, end_depth: f64, halted: bool) -> StepSummary {
        let n = self.n.max(1) as f64;
        StepSummary {
            mean_force: [self.sum[0] / n, self.sum[1] / n, self.sum[2] / n],
            max_force: self.max,
            end_depth,
            halted,
            inner_steps: self.n,
        }
    }
}

/// Runs the three primitives for one agent step.
pub fn execute_step(
    p: &PrimitiveParams,
    bucket: &BucketState,
    grid: &mut TerrainGrid,
    limits: &LimitState,
    cfg: &SimConfig,
) -> Result<(BucketState, LimitState, StepSummary), SimError> {
    if bucket.halted {
        return Err(SimError::Halted);
    }
    let mut b = *bucket;
    let mut lim = *limits;
    let mut acc = ForceAccumulator::default();
    let release = cfg.lift_release_fraction * p.f_lim_z;
    for _ in 0..INNER_STEPS {
        let cmd = VelocityCommand {
            // a negative v_x flips the sweep relative to the current parity
            vx: lim.sweep_dir * p.v_x,
            vz: if lim.lifting { LIFT_SPEED } else { p.v_z },
            vpitch: lim.rotate_dir * p.w_pitch,
        };
        let step = sim_step(grid, &b, cmd, cfg)?;
        acc.push(step.reading.as_array());
        let moved_x = libm::fabs(step.bucket.x - b.x);
        let moved_pitch = libm::fabs(step.bucket.pitch - b.pitch);
        b = step.bucket;
        if step.halt.is_some() {
            break;
        }
        let r = step.reading;

        lim.sweep_accum += moved_x;
        if libm::fabs(r.fx) > p.f_lim_x || lim.sweep_accum >= p.d_lim_x - 1e-12 {
            lim.sweep_dir = -lim.sweep_dir;
            lim.sweep_accum = 0.0;
        }
        lim.rotate_accum += moved_pitch;
        if libm::fabs(r.mpitch) > p.m_lim_pitch || lim.rotate_accum >= p.a_lim_pitch - 1e-12 {
            lim.rotate_dir = -lim.rotate_dir;
            lim.rotate_accum = 0.0;
        }
        if !lim.lifting && r.fz > p.f_lim_z {
            lim.lifting = true;
        } else if lim.lifting && r.fz < release {
            lim.lifting = false;
        }
    }
    let summary = acc.finish(depth_of(&b, grid), b.halted);
    Ok((b, lim, summary))
}

/// One agent step of the fixed vertical-downward trajectory (no limit logic).
pub fn vertical_baseline_step(
    bucket: &BucketState,
    grid: &mut TerrainGrid,
    cfg: &SimConfig,
) -> Result<(BucketState, StepSummary), SimError> {
    if bucket.halted {
        return Err(SimError::Halted);
    }
    let mut b = *bucket;
    let mut acc = ForceAccumulator::default();
    let cmd = VelocityCommand::new(0.0, -BASELINE_SPEED, 0.0);
    for _ in 0..INNER_STEPS {
        let step = sim_step(grid, &b, cmd, cfg)?;
        acc.push(step.reading.as_array());
        b = step.bucket;
        if step.halt.is_some() {
            break;
        }
    }
    let summary = acc.finish(depth_of(&b, grid), b.halted);
    Ok((b, summary))
}
