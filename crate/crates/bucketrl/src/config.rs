//! Pipeline defaults, `--config` overrides and the `terrains.json` preset file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use bucketrl_core::encoder::EncoderConfig;
use bucketrl_core::episode::EpisodeConfig;
use bucketrl_core::eval::default_thresholds;
use bucketrl_core::iql::{FinetuneConfig, IqlHyper};
use bucketrl_core::terrain::{SimError, TerrainKind, TerrainSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const TERRAIN_FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },
    #[error("{}: unknown configuration key `{key}`", path.display())]
    UnknownKey { path: PathBuf, key: String },
    #[error("{}: unsupported terrain file version {found} (expected {TERRAIN_FILE_VERSION})", path.display())]
    Version { path: PathBuf, found: u32 },
    #[error("{}: preset {name}: {source}", path.display())]
    InvalidPreset { path: PathBuf, name: TerrainKind, source: SimError },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeleopConfig {
    /// Advance one agent step per received command instead of on a timer.
    pub lockstep: bool,
    /// Agent step period in real-time mode.
    pub step_period_ms: u64,
}

impl Default for TeleopConfig {
    fn default() -> Self {
        TeleopConfig { lockstep: false, step_period_ms: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub episode: EpisodeConfig,
    pub encoder: EncoderConfig,
    pub encoder_seed: u64,
    pub iql: IqlHyper,
    pub finetune: FinetuneConfig,
    pub finetune_seed: u64,
    pub eval_seed: u64,
    /// Scripted demonstrations used to infer `z_demo` on terrains the agent
    /// has not seen.
    pub demo_trajectories: usize,
    pub thresholds: Vec<f64>,
    pub teleop: TeleopConfig,
    /// Optional `terrains.json` replacing the built-in presets.
    pub terrains: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            episode: EpisodeConfig::default(),
            encoder: EncoderConfig::default(),
            encoder_seed: 0,
            iql: IqlHyper::default(),
            finetune: FinetuneConfig::default(),
            finetune_seed: 0,
            eval_seed: 0,
            demo_trajectories: 10,
            thresholds: default_thresholds(),
            teleop: TeleopConfig::default(),
            terrains: None,
        }
    }
}

/// Overlays `patch` onto `base`; every key in `patch` must exist in `base`.
fn overlay(base: &mut Value, patch: Value, prefix: &str) -> Result<(), String> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => overlay(slot, v, &key)?,
                    Some(slot) => *slot = v,
                    None => return Err(key),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

impl PipelineConfig {
    /// Defaults overridden by the JSON object in `path`. Relative terrain file
    /// paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = fs::read(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let patch: Value =
            serde_json::from_slice(&raw).map_err(|e| ConfigError::Parse { path: path.into(), msg: e.to_string() })?;
        if !patch.is_object() {
            return Err(ConfigError::Parse { path: path.into(), msg: "expected a JSON object".into() });
        }
        let mut base = serde_json::to_value(PipelineConfig::default()).expect("defaults serialize");
        overlay(&mut base, patch, "").map_err(|key| ConfigError::UnknownKey { path: path.into(), key })?;
        let mut cfg: PipelineConfig =
            serde_json::from_value(base).map_err(|e| ConfigError::Parse { path: path.into(), msg: e.to_string() })?;
        if let (Some(t), Some(dir)) = (cfg.terrains.as_mut(), path.parent()) {
            if t.is_relative() {
                *t = dir.join(&*t);
            }
        }
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, ConfigError> {
        path.map_or_else(|| Ok(PipelineConfig::default()), PipelineConfig::load)
    }

    pub fn presets(&self) -> Result<TerrainPresets, ConfigError> {
        match &self.terrains {
            Some(p) => load_terrains(p),
            None => Ok(TerrainPresets::builtin()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerrainFile {
    pub schema_version: u32,
    pub presets: Vec<TerrainSpec>,
}

/// Preset lookup; terrains missing from a loaded file fall back to the
/// built-in tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct TerrainPresets(BTreeMap<TerrainKind, TerrainSpec>);

impl TerrainPresets {
    pub fn builtin() -> Self {
        TerrainPresets(TerrainKind::ALL.iter().map(|k| (*k, TerrainSpec::preset(*k))).collect())
    }

    pub fn get(&self, kind: TerrainKind) -> TerrainSpec {
        self.0.get(&kind).copied().unwrap_or_else(|| TerrainSpec::preset(kind))
    }

    pub fn to_file(&self) -> TerrainFile {
        TerrainFile { schema_version: TERRAIN_FILE_VERSION, presets: self.0.values().copied().collect() }
    }
}

pub fn load_terrains(path: &Path) -> Result<TerrainPresets, ConfigError> {
    let raw = fs::read(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    let probe: Value =
        serde_json::from_slice(&raw).map_err(|e| ConfigError::Parse { path: path.into(), msg: e.to_string() })?;
    match probe.get("schema_version").and_then(Value::as_u64) {
        Some(v) if v == TERRAIN_FILE_VERSION as u64 => {}
        Some(v) => return Err(ConfigError::Version { path: path.into(), found: v as u32 }),
        None => return Err(ConfigError::Parse { path: path.into(), msg: "missing schema_version".into() }),
    }
    let file: TerrainFile =
        serde_json::from_value(probe).map_err(|e| ConfigError::Parse { path: path.into(), msg: e.to_string() })?;
    let mut out = TerrainPresets::builtin();
    for spec in file.presets {
        spec.validate().map_err(|source| ConfigError::InvalidPreset { path: path.into(), name: spec.name, source })?;
        out.0.insert(spec.name, spec);
    }
    Ok(out)
}

pub fn save_terrains(presets: &TerrainPresets, path: &Path) -> Result<(), ConfigError> {
    let mut bytes =
        serde_json::to_vec_pretty(&presets.to_file()).map_err(|e| ConfigError::Parse { path: path.into(), msg: e.to_string() })?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|source| ConfigError::Io { path: path.into(), source })
}
