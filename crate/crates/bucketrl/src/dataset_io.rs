//! Dataset directories: `meta.json` plus one trajectory per line in
//! `trajectories.jsonl`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use bucketrl_core::episode::{Dataset, DatasetError, NormStats, RewardParams, Trajectory, SCHEMA_VERSION};
use bucketrl_core::terrain::TerrainKind;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::json;

pub const META_FILE: &str = "meta.json";
pub const TRAJECTORY_FILE: &str = "trajectories.jsonl";

#[derive(Debug, Error)]
pub enum DatasetIoError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: malformed metadata: {msg}", path.display())]
    Meta { path: PathBuf, msg: String },
    #[error("{}: record {index} at byte offset {offset}: {msg}", path.display())]
    Record { path: PathBuf, index: usize, offset: u64, msg: String },
    #[error("unsupported dataset schema version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("{}: metadata lists {expected} trajectories but the file ends at byte offset {offset} after {found}", path.display())]
    Count { path: PathBuf, expected: usize, found: usize, offset: u64 },
    #[error(transparent)]
    Invalid(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    schema_version: u32,
    terrains: BTreeSet<TerrainKind>,
    norm_stats: Option<NormStats>,
    reward: RewardParams,
    seeds: Vec<u64>,
    trajectory_count: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetIoError + '_ {
    move |source| DatasetIoError::Io { path: path.to_path_buf(), source }
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), DatasetIoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta = Meta {
        schema_version: ds.schema_version,
        terrains: ds.terrains.clone(),
        norm_stats: ds.norm_stats.clone(),
        reward: ds.reward,
        seeds: ds.seeds.clone(),
        trajectory_count: ds.trajectories.len(),
    };
    let meta_path = dir.join(META_FILE);
    let bytes = json::to_pretty(&meta).map_err(|e| DatasetIoError::Meta { path: meta_path.clone(), msg: e.to_string() })?;
    fs::write(&meta_path, bytes).map_err(io_err(&meta_path))?;

    let traj_path = dir.join(TRAJECTORY_FILE);
    let mut body = Vec::new();
    for (index, t) in ds.trajectories.iter().enumerate() {
        let line = json::to_line(t).map_err(|e| DatasetIoError::Record {
            path: traj_path.clone(),
            index,
            offset: body.len() as u64,
            msg: e.to_string(),
        })?;
        body.extend_from_slice(&line);
        body.push(b'\n');
    }
    fs::write(&traj_path, body).map_err(io_err(&traj_path))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DatasetIoError> {
    let meta_path = dir.join(META_FILE);
    let raw = fs::read(&meta_path).map_err(io_err(&meta_path))?;
    let version: VersionProbe = serde_json::from_slice(&raw)
        .map_err(|e| DatasetIoError::Meta { path: meta_path.clone(), msg: e.to_string() })?;
    if version.schema_version != SCHEMA_VERSION {
        return Err(DatasetIoError::Version { expected: SCHEMA_VERSION, found: version.schema_version });
    }
    let meta: Meta =
        serde_json::from_slice(&raw).map_err(|e| DatasetIoError::Meta { path: meta_path, msg: e.to_string() })?;

    let traj_path = dir.join(TRAJECTORY_FILE);
    let body = fs::read(&traj_path).map_err(io_err(&traj_path))?;
    let trajectories = parse_records(&body, &traj_path)?;
    if trajectories.len() != meta.trajectory_count {
        return Err(DatasetIoError::Count {
            path: traj_path,
            expected: meta.trajectory_count,
            found: trajectories.len(),
            offset: body.len() as u64,
        });
    }

    let ds = Dataset {
        schema_version: meta.schema_version,
        terrains: meta.terrains,
        norm_stats: meta.norm_stats,
        reward: meta.reward,
        seeds: meta.seeds,
        trajectories,
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: u32,
}

fn parse_records(body: &[u8], path: &Path) -> Result<Vec<Trajectory>, DatasetIoError> {
    let mut out = Vec::new();
    let mut start = 0usize;
    while start < body.len() {
        let end = body[start..].iter().position(|b| *b == b'\n').map_or(body.len(), |p| start + p);
        let line = &body[start..end];
        let t: Trajectory = serde_json::from_slice(line).map_err(|e| {
            // serde_json columns are 1-based and count bytes on single-line input
            let col = if e.is_eof() || e.line() > 1 { line.len() } else { e.column().saturating_sub(1) };
            DatasetIoError::Record {
                path: path.to_path_buf(),
                index: out.len(),
                offset: (start + col.min(line.len())) as u64,
                msg: e.to_string(),
            }
        })?;
        out.push(t);
        start = end + 1;
    }
    Ok(out)
}

/// Appends `traj` to the dataset at `dir`, creating it when absent, and
/// refreshes its normalization statistics.
pub fn append_trajectory(dir: &Path, traj: Trajectory, reward: RewardParams) -> Result<Dataset, DatasetIoError> {
    let mut ds = if dir.join(META_FILE).exists() { load_dataset(dir)? } else { Dataset::new(reward) };
    ds.push(traj);
    ds.recompute_stats()?;
    save_dataset(&ds, dir)?;
    Ok(ds)
}

/// Loads and merges several dataset directories.
pub fn load_merged(dirs: &[PathBuf]) -> Result<Dataset, DatasetIoError> {
    let parts = dirs.iter().map(|d| load_dataset(d)).collect::<Result<Vec<_>, _>>()?;
    if parts.len() == 1 {
        return Ok(parts.into_iter().next().unwrap());
    }
    Ok(bucketrl_core::episode::merge_datasets(&parts)?)
}
