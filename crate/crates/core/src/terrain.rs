//! Layered-blockage surrogate of a rigid-object bed in a 2D cross-section.
//!
//! The bed is discretized into lateral cells and 5 mm depth layers. Each
//! cell-layer holds a blockage scalar in `[0, 1]` standing for interlocked
//! fragments. Pushing the bucket teeth into a blocked layer builds a force
//! spike at a fixed ramp rate; sweeping and rotating erode blockage
//! multiplicatively, and the bucket settles into the loosened volume.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::floor;
use crate::rng::{rng_from_seed, SimRng};

/// Lateral extent of the default bed, meters.
pub const GRID_WIDTH: f64 = 0.4;
/// Depth of the default bed, meters.
pub const GRID_DEPTH: f64 = 0.12;
/// Half-width of the initial-contact sampling window, meters.
pub const CONTACT_WINDOW: f64 = 0.075;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid terrain configuration: {0}")]
    Config(&'static str),
    #[error("non-finite value in velocity command")]
    NonFinite,
    #[error("bucket is halted")]
    Halted,
    #[error("initial contact offset {0} lies outside the bed")]
    Sampling(f64),
    #[error("unknown terrain `{0}`")]
    UnknownTerrain(alloc::string::String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerrainKind {
    Sand,
    PeaPebbles,
    MarbleChips,
    RedMulch,
    WoodBlocks,
    FragmentedRocks,
}

impl TerrainKind {
    pub const ALL: [TerrainKind; 6] = [
        TerrainKind::Sand,
        TerrainKind::PeaPebbles,
        TerrainKind::MarbleChips,
        TerrainKind::RedMulch,
        TerrainKind::WoodBlocks,
        TerrainKind::FragmentedRocks,
    ];

    /// The five terrains offline datasets are collected on.
    pub const TRAINING: [TerrainKind; 5] = [
        TerrainKind::Sand,
        TerrainKind::PeaPebbles,
        TerrainKind::MarbleChips,
        TerrainKind::RedMulch,
        TerrainKind::WoodBlocks,
    ];

    /// Presets made of large interlocking pieces.
    pub const RIGID: [TerrainKind; 3] = [
        TerrainKind::MarbleChips,
        TerrainKind::WoodBlocks,
        TerrainKind::FragmentedRocks,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TerrainKind::Sand => "sand",
            TerrainKind::PeaPebbles => "pea_pebbles",
            TerrainKind::MarbleChips => "marble_chips",
            TerrainKind::RedMulch => "red_mulch",
            TerrainKind::WoodBlocks => "wood_blocks",
            TerrainKind::FragmentedRocks => "fragmented_rocks",
        }
    }

    pub fn index(self) -> usize {
        TerrainKind::ALL.iter().position(|k| *k == self).unwrap()
    }
}

impl fmt::Display for TerrainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TerrainKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TerrainKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| SimError::UnknownTerrain(s.into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerrainSpec {
    pub name: TerrainKind,
    /// Lateral discretization, meters.
    pub cell_width: f64,
    /// Depth discretization, meters.
    pub layer_depth: f64,
    /// Probability that a cell-layer holds a blocker.
    pub block_prob: f64,
    /// Peak resistance of a full blocker, Newtons.
    pub block_force_scale: f64,
    /// Depth-proportional resistance, N/m.
    pub base_stiffness: f64,
    pub friction_coeff: f64,
    /// Multiplicative blockage reduction per sweep pass.
    pub agitation_sweep: f64,
    /// Multiplicative blockage reduction per rotation pass.
    pub agitation_rotate: f64,
}

impl TerrainSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let finite = [
            self.cell_width,
            self.layer_depth,
            self.block_prob,
            self.block_force_scale,
            self.base_stiffness,
            self.friction_coeff,
            self.agitation_sweep,
            self.agitation_rotate,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(SimError::Config("non-finite field"));
        }
        if !(0.0..=1.0).contains(&self.block_prob) {
            return Err(SimError::Config("block_prob must lie in [0, 1]"));
        }
        for a in [self.agitation_sweep, self.agitation_rotate] {
            if !(a > 0.0 && a < 1.0) {
                return Err(SimError::Config("agitation factors must lie in (0, 1)"));
            }
        }
        if self.block_force_scale <= 0.0 || self.base_stiffness <= 0.0 || self.friction_coeff <= 0.0 {
            return Err(SimError::Config("force, stiffness and friction values must be positive"));
        }
        if self.cell_width <= 0.0 || self.layer_depth <= 0.0 {
            return Err(SimError::Config("cell width and layer depth must be positive"));
        }
        Ok(())
    }

    /// Built-in calibrated preset for `kind`.
    pub fn preset(kind: TerrainKind) -> TerrainSpec {
        // (block_prob, block_force_scale, base_stiffness, friction, sweep, rotate)
        let (p, scale, k, mu, sweep, rotate) = match kind {
            TerrainKind::Sand => (1.0, 25.0, 200.0, 0.30, 0.2, 0.35),
            TerrainKind::PeaPebbles => (0.35, 85.0, 320.0, 0.22, 0.6, 0.7),
            TerrainKind::MarbleChips => (0.35, 190.0, 420.0, 0.18, 0.65, 0.75),
            TerrainKind::RedMulch => (0.30, 70.0, 180.0, 0.28, 0.6, 0.7),
            TerrainKind::WoodBlocks => (0.30, 170.0, 220.0, 0.12, 0.6, 0.7),
            TerrainKind::FragmentedRocks => (0.35, 230.0, 520.0, 0.25, 0.72, 0.8),
        };
        TerrainSpec {
            name: kind,
            cell_width: 0.01,
            layer_depth: 0.005,
            block_prob: p,
            block_force_scale: scale,
            base_stiffness: k,
            friction_coeff: mu,
            agitation_sweep: sweep,
            agitation_rotate: rotate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Inner controller period, seconds.
    pub dt_inner: f64,
    pub halt_force: f64,
    pub stall_force: f64,
    /// Contact reading that marks the start of the penetration phase.
    pub contact_start_force: f64,
    /// Spike growth, Newtons per inner step.
    pub spike_ramp_rate: f64,
    pub lift_release_fraction: f64,
    /// Lever arm converting lateral resistance into a pitch moment, meters.
    pub moment_arm: f64,
    /// Fraction of a blocker's force scale felt by lateral (frontal) motion.
    pub frontal_fraction: f64,
    /// Pitch travel that counts as one rotation pass, radians.
    pub rotate_pass_angle: f64,
    /// Layers of settlement per unit of blockage eroded under the teeth.
    pub settle_gain: f64,
    /// Attack angle the bucket is placed at on contact, radians.
    pub nominal_pitch: f64,
    /// Allowed pitch excursion around the nominal attack angle, radians.
    pub pitch_range: f64,
    /// Highest the teeth may rise above the initial surface, meters.
    pub hover_limit: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt_inner: 1e-3,
            halt_force: 90.0,
            stall_force: 110.0,
            contact_start_force: 3.0,
            spike_ramp_rate: 2.0,
            lift_release_fraction: 0.5,
            moment_arm: 0.15,
            frontal_fraction: 0.25,
            rotate_pass_angle: 0.05,
            settle_gain: 1.0,
            nominal_pitch: 0.5,
            pitch_range: 0.6,
            hover_limit: 0.005,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt_inner > 0.0) {
            return Err(SimError::Config("dt_inner must be positive"));
        }
        // contact start < primitive limits (>= 25 N, <= 70 N) < halt < stall
        if !(self.contact_start_force < 25.0 && 70.0 < self.halt_force && self.halt_force < self.stall_force) {
            return Err(SimError::Config("force thresholds out of order"));
        }
        if !(self.spike_ramp_rate > 0.0) || !(self.lift_release_fraction > 0.0 && self.lift_release_fraction < 1.0) {
            return Err(SimError::Config("ramp rate and lift release fraction"));
        }
        Ok(())
    }
}

/// Bed extent in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridExtent {
    pub width: f64,
    pub depth: f64,
}

impl Default for GridExtent {
    fn default() -> Self {
        GridExtent { width: GRID_WIDTH, depth: GRID_DEPTH }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerrainGrid {
    pub spec: TerrainSpec,
    pub seed: u64,
    pub cells: usize,
    pub layers: usize,
    /// Row-major `[cell][layer]`.
    blockage: Vec<f64>,
    /// Initial surface height per cell, meters above the bed floor.
    pub surface_height: Vec<f64>,
}

/// Builds the bed for `spec` at the default extent.
pub fn make_terrain(spec: &TerrainSpec, seed: u64) -> Result<TerrainGrid, SimError> {
    make_terrain_sized(spec, seed, GridExtent::default())
}

pub fn make_terrain_sized(spec: &TerrainSpec, seed: u64, extent: GridExtent) -> Result<TerrainGrid, SimError> {
    spec.validate()?;
    let cells = libm::round(extent.width / spec.cell_width) as usize;
    let layers = libm::round(extent.depth / spec.layer_depth) as usize;
    if cells == 0 || layers == 0 {
        return Err(SimError::Config("bed extent smaller than one cell"));
    }
    let mut rng = rng_from_seed(seed);
    let mut blockage = vec![0.0; cells * layers];
    for b in blockage.iter_mut() {
        let occupied: f64 = rng.random();
        let magnitude: f64 = rng.random();
        if occupied < spec.block_prob {
            // (0.5, 1.0]
            *b = 1.0 - 0.5 * magnitude;
        }
    }
    let top = layers as f64 * spec.layer_depth;
    Ok(TerrainGrid {
        spec: *spec,
        seed,
        cells,
        layers,
        blockage,
        surface_height: vec![top; cells],
    })
}

impl TerrainGrid {
    pub fn width(&self) -> f64 {
        self.cells as f64 * self.spec.cell_width
    }

    pub fn blockage(&self, cell: usize, layer: usize) -> f64 {
        self.blockage[cell * self.layers + layer]
    }

    pub fn set_blockage(&mut self, cell: usize, layer: usize, value: f64) {
        self.blockage[cell * self.layers + layer] = value.clamp(0.0, 1.0);
    }

    pub fn blockage_values(&self) -> &[f64] {
        &self.blockage
    }

    /// Cell holding lateral position `x`, clamped to the bed.
    pub fn cell_of(&self, x: f64) -> usize {
        let c = floor(x / self.spec.cell_width);
        if c <= 0.0 {
            0
        } else {
            (c as usize).min(self.cells - 1)
        }
    }

    /// Layer holding a point `depth` meters below the surface; `None` above it.
    pub fn layer_at(&self, depth: f64) -> Option<usize> {
        if depth < 0.0 {
            return None;
        }
        Some((floor(depth / self.spec.layer_depth) as usize).min(self.layers - 1))
    }

    /// Signed depth of the teeth below the initial surface (negative above it).
    pub fn signed_depth(&self, bucket: &BucketState) -> f64 {
        self.surface_height[self.cell_of(bucket.x)] - bucket.z
    }

    /// Multiplies a cell-layer's blockage by `factor`; returns the amount removed.
    fn erode(&mut self, cell: usize, layer: usize, factor: f64) -> f64 {
        let idx = cell * self.layers + layer;
        let before = self.blockage[idx];
        self.blockage[idx] = before * factor;
        before - self.blockage[idx]
    }
}

/// Internal contact memory of the plant (force spikes and rotation travel).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ContactMemory {
    pub spike_z: f64,
    pub spike_x: f64,
    /// Direction (+1/-1) the lateral spike was built in; 0 when unloaded.
    pub spike_x_dir: f64,
    pub pitch_travel: f64,
    /// Previous vertical and lateral reading magnitudes; readings rise at
    /// most `spike_ramp_rate` per inner step.
    pub fz_prev: f64,
    pub fx_prev: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BucketState {
    pub x: f64,
    pub z: f64,
    pub pitch: f64,
    pub vx: f64,
    pub vz: f64,
    pub vpitch: f64,
    pub halted: bool,
    pub contact: ContactMemory,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ContactReading {
    pub fx: f64,
    pub fz: f64,
    pub mpitch: f64,
}

impl ContactReading {
    pub fn as_array(&self) -> [f64; 3] {
        [self.fx, self.fz, self.mpitch]
    }

    /// Largest component magnitude, the quantity the halt criterion looks at.
    pub fn max_abs(&self) -> f64 {
        libm::fabs(self.fx).max(libm::fabs(self.fz)).max(libm::fabs(self.mpitch))
    }
}

/// Commanded bucket velocity `(vx, vz, vpitch)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VelocityCommand {
    pub vx: f64,
    pub vz: f64,
    pub vpitch: f64,
}

impl VelocityCommand {
    pub const ZERO: VelocityCommand = VelocityCommand { vx: 0.0, vz: 0.0, vpitch: 0.0 };

    pub fn new(vx: f64, vz: f64, vpitch: f64) -> Self {
        VelocityCommand { vx, vz, vpitch }
    }
}

/// The controller halted the robot because a force component reached `halt_force`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HaltEvent {
    pub reading: ContactReading,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimStep {
    pub bucket: BucketState,
    pub reading: ContactReading,
    pub halt: Option<HaltEvent>,
}

/// Places the bucket on the surface at a uniformly sampled lateral offset.
pub fn sample_initial_contact(grid: &TerrainGrid, rng: &mut SimRng, cfg: &SimConfig) -> Result<BucketState, SimError> {
    let offset = rng.random_range(-CONTACT_WINDOW..=CONTACT_WINDOW);
    let x = 0.5 * grid.width() + offset;
    if !(x >= 0.0 && x < grid.width()) {
        return Err(SimError::Sampling(offset));
    }
    let cell = grid.cell_of(x);
    // Resistance is contact_start_force + stiffness * depth once the teeth
    // touch the surface, so the first depth reaching the contact threshold is
    // the surface itself.
    Ok(BucketState {
        x,
        z: grid.surface_height[cell],
        pitch: cfg.nominal_pitch,
        contact: ContactMemory { fz_prev: cfg.contact_start_force, ..ContactMemory::default() },
        ..BucketState::default()
    })
}

/// Vertical resistance the bucket would feel pushing down from its current pose.
pub fn static_resistance(grid: &TerrainGrid, bucket: &BucketState, cfg: &SimConfig) -> f64 {
    let depth = grid.signed_depth(bucket);
    if depth < 0.0 {
        0.0
    } else {
        (cfg.contact_start_force + grid.spec.base_stiffness * depth + bucket.contact.spike_z).min(cfg.stall_force)
    }
}

/// Teeth depth below the initial surface, clamped at zero.
pub fn depth_of(bucket: &BucketState, grid: &TerrainGrid) -> f64 {
    grid.signed_depth(bucket).max(0.0)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One inner controller step.
pub fn sim_step(
    grid: &mut TerrainGrid,
    bucket: &BucketState,
    cmd: VelocityCommand,
    cfg: &SimConfig,
) -> Result<SimStep, SimError> {
    if !(cmd.vx.is_finite() && cmd.vz.is_finite() && cmd.vpitch.is_finite()) {
        return Err(SimError::NonFinite);
    }
    if bucket.halted {
        return Err(SimError::Halted);
    }
    let spec = grid.spec;
    let ramp = cfg.spike_ramp_rate;
    let mut next = *bucket;
    let mut mem = bucket.contact;

    let cell = grid.cell_of(bucket.x);
    let depth = grid.signed_depth(bucket);
    let layer = grid.layer_at(depth);
    let b = layer.map_or(0.0, |l| grid.blockage(cell, l));

    // Vertical: contact preload + depth stiffness + blockage spike while
    // pushing down; only the decaying spike remains otherwise.
    let pushing_down = cmd.vz < 0.0 && depth >= 0.0;
    let cap_z = b * spec.block_force_scale;
    if pushing_down {
        mem.spike_z = if mem.spike_z > cap_z { cap_z } else { (mem.spike_z + ramp).min(cap_z) };
    } else {
        mem.spike_z = (mem.spike_z - ramp).max(0.0);
    }
    let fz = if pushing_down {
        cfg.contact_start_force + spec.base_stiffness * depth + mem.spike_z
    } else {
        mem.spike_z
    }
    .min(mem.fz_prev + ramp)
    .min(cfg.stall_force);
    mem.fz_prev = fz;

    // Lateral: friction on the vertical load plus a directional frontal spike.
    let dir_x = sign(cmd.vx);
    let pushing_lat = dir_x != 0.0 && depth > 0.0;
    if pushing_lat {
        if dir_x != mem.spike_x_dir {
            mem.spike_x = 0.0;
            mem.spike_x_dir = dir_x;
        }
        let cap_x = b * spec.block_force_scale * cfg.frontal_fraction;
        mem.spike_x = if mem.spike_x > cap_x { cap_x } else { (mem.spike_x + ramp).min(cap_x) };
    } else {
        mem.spike_x = (mem.spike_x - ramp).max(0.0);
        if mem.spike_x == 0.0 {
            mem.spike_x_dir = 0.0;
        }
    }
    let fx_mag = if pushing_lat {
        (spec.friction_coeff * fz + mem.spike_x).min(mem.fx_prev + ramp).min(cfg.stall_force)
    } else {
        0.0
    };
    mem.fx_prev = fx_mag;
    let fx = -dir_x * fx_mag;
    let mpitch = fx * cfg.moment_arm;
    let reading = ContactReading { fx, fz, mpitch };

    next.contact = mem;
    if reading.max_abs() >= cfg.halt_force {
        next.halted = true;
        next.vx = 0.0;
        next.vz = 0.0;
        next.vpitch = 0.0;
        return Ok(SimStep { bucket: next, reading, halt: Some(HaltEvent { reading }) });
    }

    // The impedance controller tracks the reference through homogeneous
    // material; blockage spikes slow it down toward stall.
    let stall = cfg.stall_force;
    let vz = if pushing_down { cmd.vz * (1.0 - mem.spike_z / stall).max(0.0) } else { cmd.vz };
    let vx = if pushing_lat { cmd.vx * (1.0 - mem.spike_x / stall).max(0.0) } else { cmd.vx };
    let vpitch = cmd.vpitch * (1.0 - mem.spike_x * cfg.moment_arm / stall).max(0.0);

    let dt = cfg.dt_inner;
    let max_x = grid.width() - 1e-9;
    let mut x = bucket.x + vx * dt;
    let mut vx_actual = vx;
    if x < 0.0 || x > max_x {
        x = x.clamp(0.0, max_x);
        vx_actual = (x - bucket.x) / dt;
    }
    let floor_z = 0.0;
    let ceiling = grid.surface_height[cell] + cfg.hover_limit;
    let mut z = bucket.z + vz * dt;
    let mut vz_actual = vz;
    if z < floor_z || z > ceiling {
        z = z.clamp(floor_z, ceiling);
        vz_actual = (z - bucket.z) / dt;
    }
    let lo = cfg.nominal_pitch - cfg.pitch_range;
    let hi = cfg.nominal_pitch + cfg.pitch_range;
    let mut pitch = bucket.pitch + vpitch * dt;
    let mut vpitch_actual = vpitch;
    if pitch < lo || pitch > hi {
        pitch = pitch.clamp(lo, hi);
        vpitch_actual = (pitch - bucket.pitch) / dt;
    }

    // Agitation: entering a cell below the surface scrapes the teeth layer;
    // accumulated pitch travel loosens the layer under the bucket.
    let mut settle = 0.0;
    let new_cell = grid.cell_of(x);
    if new_cell != cell {
        let d_new = grid.surface_height[new_cell] - z;
        if d_new >= 0.0 {
            if let Some(l) = grid.layer_at(d_new) {
                settle += grid.erode(new_cell, l, spec.agitation_sweep);
            }
        }
    }
    let d_now = grid.surface_height[new_cell] - z;
    if d_now >= 0.0 {
        mem.pitch_travel += libm::fabs(pitch - bucket.pitch);
        while mem.pitch_travel >= cfg.rotate_pass_angle {
            mem.pitch_travel -= cfg.rotate_pass_angle;
            if let Some(l) = grid.layer_at(d_now) {
                let lo_c = new_cell.saturating_sub(1);
                let hi_c = (new_cell + 1).min(grid.cells - 1);
                for c in lo_c..=hi_c {
                    let removed = grid.erode(c, l, spec.agitation_rotate);
                    if c == new_cell {
                        settle += removed;
                    }
                }
            }
        }
    }
    if settle > 0.0 {
        z = (z - settle * spec.layer_depth * cfg.settle_gain).max(floor_z);
    }

    next.x = x;
    next.z = z;
    next.pitch = pitch;
    next.vx = vx_actual;
    next.vz = vz_actual;
    next.vpitch = vpitch_actual;
    next.contact = mem;
    Ok(SimStep { bucket: next, reading, halt: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn empty(kind: TerrainKind) -> TerrainSpec {
        TerrainSpec { block_prob: 0.0, ..TerrainSpec::preset(kind) }
    }

    fn bucket_at(grid: &TerrainGrid, x: f64, depth: f64) -> BucketState {
        let cell = grid.cell_of(x);
        BucketState { x, z: grid.surface_height[cell] - depth, pitch: 0.5, ..BucketState::default() }
    }

    #[test]
    fn zero_probability_gives_empty_bed() {
        let g = make_terrain(&empty(TerrainKind::Sand), 7).unwrap();
        assert!(g.blockage_values().iter().all(|b| *b == 0.0));
    }

    #[test]
    fn same_seed_same_bed() {
        let spec = TerrainSpec::preset(TerrainKind::FragmentedRocks);
        assert_eq!(make_terrain(&spec, 42).unwrap(), make_terrain(&spec, 42).unwrap());
        assert_ne!(make_terrain(&spec, 42).unwrap(), make_terrain(&spec, 43).unwrap());
    }

    #[test]
    fn blocker_fraction_matches_probability() {
        let spec = TerrainSpec { block_prob: 0.5, ..TerrainSpec::preset(TerrainKind::FragmentedRocks) };
        let g = make_terrain_sized(&spec, 42, GridExtent { width: 4.0, depth: 0.125 }).unwrap();
        assert_eq!(g.cells * g.layers, 10_000);
        let n = g.blockage_values().iter().filter(|b| **b > 0.5).count();
        let frac = n as f64 / 10_000.0;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let base = TerrainSpec::preset(TerrainKind::Sand);
        for bad in [
            TerrainSpec { block_prob: 1.5, ..base },
            TerrainSpec { agitation_sweep: 1.0, ..base },
            TerrainSpec { agitation_rotate: 0.0, ..base },
            TerrainSpec { base_stiffness: -1.0, ..base },
            TerrainSpec { block_force_scale: 0.0, ..base },
        ] {
            assert!(matches!(make_terrain(&bad, 1), Err(SimError::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn terrain_names_round_trip() {
        for k in TerrainKind::ALL {
            assert_eq!(k.as_str().parse::<TerrainKind>().unwrap(), k);
        }
        assert!("gravel".parse::<TerrainKind>().is_err());
    }

    #[test]
    fn initial_contact_statistics() {
        let g = make_terrain(&TerrainSpec::preset(TerrainKind::RedMulch), 3).unwrap();
        let cfg = SimConfig::default();
        let a = sample_initial_contact(&g, &mut rng_from_seed(9), &cfg).unwrap();
        let b = sample_initial_contact(&g, &mut rng_from_seed(9), &cfg).unwrap();
        assert_eq!(a, b);
        let mut rng = rng_from_seed(10);
        let offs: Vec<f64> = (0..1000)
            .map(|_| sample_initial_contact(&g, &mut rng, &cfg).unwrap().x - 0.5 * g.width())
            .collect();
        let lo = offs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = offs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = offs.iter().sum::<f64>() / 1000.0;
        assert!(lo >= -CONTACT_WINDOW - 1e-12 && hi <= CONTACT_WINDOW + 1e-12);
        // standard error of the mean is about 0.0014
        assert!(mean.abs() < 0.005, "{mean}");
        assert!(static_resistance(&g, &a, &cfg) >= cfg.contact_start_force);
        assert_eq!(depth_of(&a, &g), 0.0);
    }

    #[test]
    fn depth_reference_points() {
        let g = make_terrain(&TerrainSpec::preset(TerrainKind::Sand), 1).unwrap();
        assert!((depth_of(&bucket_at(&g, 0.2, 0.05), &g) - 0.05).abs() < 1e-12);
        assert_eq!(depth_of(&bucket_at(&g, 0.2, -0.003), &g), 0.0);
    }

    #[test]
    fn still_bucket_in_empty_bed_feels_nothing() {
        let mut g = make_terrain(&empty(TerrainKind::Sand), 1).unwrap();
        let b = bucket_at(&g, 0.2, 0.0);
        let s = sim_step(&mut g, &b, VelocityCommand::ZERO, &SimConfig::default()).unwrap();
        assert_eq!(s.bucket, b);
        assert_eq!(s.reading.as_array(), [0.0; 3]);
        assert!(s.halt.is_none());
    }

    #[test]
    fn spike_ramps_at_fixed_rate_until_saturation() {
        let spec = TerrainSpec { block_force_scale: 60.0, ..empty(TerrainKind::Sand) };
        let mut g = make_terrain(&spec, 1).unwrap();
        let cell = g.cell_of(0.205);
        for l in 0..g.layers {
            g.set_blockage(cell, l, 1.0);
        }
        let cfg = SimConfig::default();
        let mut b = bucket_at(&g, 0.205, 0.001);
        b.contact.fz_prev = cfg.contact_start_force;
        let cmd = VelocityCommand::new(0.0, -0.001, 0.0);
        let mut fz = Vec::new();
        for _ in 0..45 {
            let s = sim_step(&mut g, &b, cmd, &cfg).unwrap();
            assert!(s.halt.is_none());
            fz.push(s.reading.fz);
            b = s.bucket;
        }
        // spike saturates at 60 N after 30 steps
        for (k, f) in fz.iter().take(30).enumerate() {
            let expect = cfg.contact_start_force + cfg.spike_ramp_rate * (k + 1) as f64;
            assert!((f - expect).abs() < 1e-9, "step {}: {f} vs {expect}", k + 1);
        }
        assert!(b.contact.spike_z == 60.0);
        assert!(fz[44] - fz[34] < 0.1, "{} {}", fz[34], fz[44]);
    }

    #[test]
    fn repeated_sweeps_decay_geometrically() {
        let spec = empty(TerrainKind::PeaPebbles);
        let mut g = make_terrain(&spec, 1).unwrap();
        g.set_blockage(11, 0, 0.5);
        let cfg = SimConfig::default();
        let mut b = bucket_at(&g, 0.105, 0.001);
        let mut expect = 0.5;
        for k in 1..=6 {
            for dir in [1.0, -1.0] {
                let target = if dir > 0.0 { 11 } else { 10 };
                while g.cell_of(b.x) != target {
                    b = sim_step(&mut g, &b, VelocityCommand::new(0.05 * dir, 0.0, 0.0), &cfg).unwrap().bucket;
                }
            }
            expect *= spec.agitation_sweep;
            assert!((g.blockage(11, 0) - expect).abs() < 1e-15, "pass {k}");
        }
        assert!((g.blockage(11, 0) - 0.5 * libm::pow(spec.agitation_sweep, 6.0)).abs() < 1e-12);
    }

    #[test]
    fn rotation_loosens_neighbouring_cells() {
        let spec = empty(TerrainKind::WoodBlocks);
        let mut g = make_terrain(&spec, 1).unwrap();
        for c in 18..=22 {
            g.set_blockage(c, 0, 1.0);
        }
        let cfg = SimConfig::default();
        let mut b = bucket_at(&g, 0.205, 0.001);
        // 0.05 rad of pitch travel is one pass
        for _ in 0..150 {
            b = sim_step(&mut g, &b, VelocityCommand::new(0.0, 0.0, 0.5), &cfg).unwrap().bucket;
        }
        for c in 19..=21 {
            assert!(g.blockage(c, 0) < 1.0, "cell {c}");
        }
        assert_eq!(g.blockage(18, 0), 1.0);
        assert_eq!(g.blockage(22, 0), 1.0);
    }

    #[test]
    fn halt_is_absorbing() {
        let spec = TerrainSpec::preset(TerrainKind::FragmentedRocks);
        let mut g = make_terrain(&spec, 1).unwrap();
        let cell = g.cell_of(0.205);
        for l in 0..g.layers {
            g.set_blockage(cell, l, 1.0);
        }
        let cfg = SimConfig::default();
        let mut b = bucket_at(&g, 0.205, 0.0);
        let mut halted = false;
        for _ in 0..200 {
            let s = sim_step(&mut g, &b, VelocityCommand::new(0.0, -0.02, 0.0), &cfg).unwrap();
            b = s.bucket;
            if s.halt.is_some() {
                halted = true;
                break;
            }
        }
        assert!(halted);
        assert!(b.halted && b.vx == 0.0 && b.vz == 0.0 && b.vpitch == 0.0);
        assert_eq!(sim_step(&mut g, &b, VelocityCommand::ZERO, &cfg), Err(SimError::Halted));
    }

    #[test]
    fn non_finite_command_is_rejected() {
        let mut g = make_terrain(&TerrainSpec::preset(TerrainKind::Sand), 1).unwrap();
        let b = bucket_at(&g, 0.2, 0.0);
        let r = sim_step(&mut g, &b, VelocityCommand::new(f64::NAN, 0.0, 0.0), &SimConfig::default());
        assert_eq!(r, Err(SimError::NonFinite));
    }

    #[test]
    fn config_ordering_is_checked() {
        assert!(SimConfig::default().validate().is_ok());
        let bad = SimConfig { halt_force: 60.0, ..SimConfig::default() };
        assert!(bad.validate().is_err());
    }
}
