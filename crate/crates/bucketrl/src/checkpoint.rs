//! Checkpoints: a JSON manifest plus a sidecar of little-endian f64 values.
//!
//! Every parameter set inside the serialized body is swapped for a
//! placeholder listing tensor names and shapes and the offset of its values in
//! the sidecar, so manifests stay small and weights round-trip bit-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use bucketrl_core::encoder::{EncoderParams, EncoderRole};
use bucketrl_core::iql::{Agent, EncoderPair};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::json;

pub const FORMAT: &str = "bucketrl-checkpoint";
pub const VERSION: u32 = 1;
pub const AGENT_MANIFEST: &str = "agent.json";
pub const CURRENT_MANIFEST: &str = "encoder_current.json";
pub const DEMO_MANIFEST: &str = "encoder_demo.json";

const OFFSET_KEY: &str = "sidecar_offset";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {msg}", path.display())]
    Malformed { path: PathBuf, msg: String },
    #[error("{}: unsupported checkpoint version {found} (expected {VERSION})", path.display())]
    Version { path: PathBuf, found: u32 },
    #[error("{}: expected a {expected} checkpoint, found {found}", path.display())]
    Kind { path: PathBuf, expected: String, found: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    schema_version: u32,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    role: Option<EncoderRole>,
    sidecar: String,
    scalars: usize,
    body: Value,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

fn malformed(path: &Path, msg: impl ToString) -> CheckpointError {
    CheckpointError::Malformed { path: path.to_path_buf(), msg: msg.to_string() }
}

fn is_param_set(m: &Map<String, Value>) -> bool {
    m.len() == 2
        && m.get("names").is_some_and(Value::is_array)
        && m.get("tensors").and_then(Value::as_array).is_some_and(|ts| ts.iter().all(|t| t.get("data").is_some()))
}

/// Moves tensor data out of `v` into `flat`.
fn extract(v: &mut Value, flat: &mut Vec<f64>, path: &Path) -> Result<(), CheckpointError> {
    match v {
        Value::Object(m) if is_param_set(m) => {
            let offset = flat.len();
            let mut shapes = Vec::new();
            for t in m["tensors"].as_array().unwrap() {
                let rows = t.get("rows").and_then(Value::as_u64).ok_or_else(|| malformed(path, "tensor without rows"))?;
                let cols = t.get("cols").and_then(Value::as_u64).ok_or_else(|| malformed(path, "tensor without cols"))?;
                let data = t["data"].as_array().unwrap();
                if data.len() as u64 != rows * cols {
                    return Err(malformed(path, "tensor data does not match its shape"));
                }
                for x in data {
                    // non-finite weights serialize as null
                    flat.push(x.as_f64().ok_or_else(|| malformed(path, "non-finite parameter value"))?);
                }
                shapes.push(json!([rows, cols]));
            }
            let names = m.remove("names").unwrap();
            *v = json!({ "names": names, "shapes": shapes, OFFSET_KEY: offset });
        }
        Value::Object(m) => {
            for x in m.values_mut() {
                extract(x, flat, path)?;
            }
        }
        Value::Array(xs) => {
            for x in xs {
                extract(x, flat, path)?;
            }
        }
        _ => {}
    }
    Ok(())
}

/// Inverse of [`extract`].
fn restore(v: &mut Value, flat: &[f64], path: &Path) -> Result<(), CheckpointError> {
    match v {
        Value::Object(m) if m.contains_key(OFFSET_KEY) => {
            let mut at = m[OFFSET_KEY].as_u64().ok_or_else(|| malformed(path, "bad sidecar offset"))? as usize;
            let shapes = m.get("shapes").and_then(Value::as_array).ok_or_else(|| malformed(path, "missing shapes"))?;
            let mut tensors = Vec::with_capacity(shapes.len());
            for s in shapes {
                let (rows, cols) = match s.as_array().map(|a| (a.first().and_then(Value::as_u64), a.get(1).and_then(Value::as_u64))) {
                    Some((Some(r), Some(c))) => (r as usize, c as usize),
                    _ => return Err(malformed(path, "bad tensor shape")),
                };
                let n = rows * cols;
                let data = flat.get(at..at + n).ok_or_else(|| malformed(path, "sidecar shorter than the manifest requires"))?;
                tensors.push(json!({ "rows": rows, "cols": cols, "data": data }));
                at += n;
            }
            let names = m.remove("names").unwrap_or(Value::Null);
            *v = json!({ "names": names, "tensors": tensors });
        }
        Value::Object(m) => {
            for x in m.values_mut() {
                restore(x, flat, path)?;
            }
        }
        Value::Array(xs) => {
            for x in xs {
                restore(x, flat, path)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn sidecar_name(manifest: &Path) -> String {
    let stem = manifest.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into());
    format!("{stem}.bin")
}

fn write_checkpoint<T: Serialize>(
    value: &T,
    kind: &str,
    role: Option<EncoderRole>,
    path: &Path,
    edit: impl FnOnce(&mut Value),
) -> Result<(), CheckpointError> {
    let mut body = serde_json::to_value(value).map_err(|e| malformed(path, e))?;
    edit(&mut body);
    let mut flat = Vec::new();
    extract(&mut body, &mut flat, path)?;
    let sidecar = sidecar_name(path);
    let manifest = Manifest {
        format: FORMAT.into(),
        schema_version: VERSION,
        kind: kind.into(),
        role,
        sidecar: sidecar.clone(),
        scalars: flat.len(),
        body,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let bin_path = path.with_file_name(&sidecar);
    let bytes: Vec<u8> = flat.iter().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(&bin_path, bytes).map_err(io_err(&bin_path))?;
    let text = json::to_pretty(&manifest).map_err(|e| malformed(path, e))?;
    fs::write(path, text).map_err(io_err(path))
}

fn read_checkpoint(path: &Path, kind: &str) -> Result<Manifest, CheckpointError> {
    let raw = fs::read(path).map_err(io_err(path))?;
    let mut m: Manifest = serde_json::from_slice(&raw).map_err(|e| malformed(path, e))?;
    if m.format != FORMAT {
        return Err(malformed(path, format!("not a {FORMAT} manifest")));
    }
    if m.schema_version != VERSION {
        return Err(CheckpointError::Version { path: path.to_path_buf(), found: m.schema_version });
    }
    if m.kind != kind {
        return Err(CheckpointError::Kind { path: path.to_path_buf(), expected: kind.into(), found: m.kind });
    }
    let bin_path = path.with_file_name(&m.sidecar);
    let bytes = fs::read(&bin_path).map_err(io_err(&bin_path))?;
    if bytes.len() != m.scalars * 8 {
        return Err(malformed(&bin_path, format!("expected {} bytes, found {}", m.scalars * 8, bytes.len())));
    }
    let flat: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    restore(&mut m.body, &flat, path)?;
    Ok(m)
}

fn decode<T: DeserializeOwned>(body: Value, path: &Path) -> Result<T, CheckpointError> {
    serde_json::from_value(body).map_err(|e| malformed(path, e))
}

pub fn save_encoder(p: &EncoderParams, path: &Path) -> Result<(), CheckpointError> {
    write_checkpoint(p, "encoder", Some(p.role), path, |_| {})
}

/// Loads an encoder checkpoint, checking its role tag when `expected` is set.
pub fn load_encoder(path: &Path, expected: Option<EncoderRole>) -> Result<EncoderParams, CheckpointError> {
    let m = read_checkpoint(path, "encoder")?;
    let p: EncoderParams = decode(m.body, path)?;
    if m.role != Some(p.role) {
        return Err(malformed(path, "role tag disagrees with the stored parameters"));
    }
    if let Some(role) = expected.filter(|r| *r != p.role) {
        return Err(CheckpointError::Kind {
            path: path.to_path_buf(),
            expected: format!("{} encoder", role.as_str()),
            found: format!("{} encoder", p.role.as_str()),
        });
    }
    Ok(p)
}

pub fn save_encoder_pair(pair: &EncoderPair, dir: &Path) -> Result<(), CheckpointError> {
    save_encoder(&pair.current, &dir.join(CURRENT_MANIFEST))?;
    save_encoder(&pair.demo, &dir.join(DEMO_MANIFEST))
}

pub fn load_encoder_pair(dir: &Path) -> Result<EncoderPair, CheckpointError> {
    Ok(EncoderPair {
        current: load_encoder(&dir.join(CURRENT_MANIFEST), Some(EncoderRole::Current))?,
        demo: load_encoder(&dir.join(DEMO_MANIFEST), Some(EncoderRole::Demo))?,
    })
}

/// An agent plus the dataset directories it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentBundle {
    pub agent: Agent,
    pub datasets: Vec<PathBuf>,
}

/// Writes `agent.json`/`agent.bin` next to the two encoder checkpoints the
/// agent manifest refers to.
pub fn save_agent(bundle: &AgentBundle, dir: &Path) -> Result<(), CheckpointError> {
    save_encoder_pair(&bundle.agent.encoders, dir)?;
    let datasets: Vec<String> = bundle.datasets.iter().map(|p| p.to_string_lossy().into_owned()).collect();
    write_checkpoint(&bundle.agent, "agent", None, &dir.join(AGENT_MANIFEST), |body| {
        let obj = body.as_object_mut().expect("agent serializes to an object");
        obj.insert("encoders".into(), json!({ "current": CURRENT_MANIFEST, "demo": DEMO_MANIFEST }));
        obj.insert("datasets".into(), json!(datasets));
    })
}

pub fn load_agent(dir: &Path) -> Result<AgentBundle, CheckpointError> {
    let path = dir.join(AGENT_MANIFEST);
    let m = read_checkpoint(&path, "agent")?;
    let mut body = m.body;
    let obj = body.as_object_mut().ok_or_else(|| malformed(&path, "agent body is not an object"))?;
    let refs = obj.remove("encoders").ok_or_else(|| malformed(&path, "missing encoder references"))?;
    let datasets: Vec<PathBuf> = match obj.remove("datasets") {
        Some(v) => decode(v, &path)?,
        None => Vec::new(),
    };
    let file = |key: &str| -> Result<PathBuf, CheckpointError> {
        refs.get(key).and_then(Value::as_str).map(|f| dir.join(f)).ok_or_else(|| malformed(&path, format!("missing {key} encoder reference")))
    };
    let current = load_encoder(&file("current")?, Some(EncoderRole::Current))?;
    let demo = load_encoder(&file("demo")?, Some(EncoderRole::Demo))?;
    obj.insert("encoders".into(), serde_json::to_value(EncoderPair { current, demo }).map_err(|e| malformed(&path, e))?);
    Ok(AgentBundle { agent: decode(body, &path)?, datasets })
}
