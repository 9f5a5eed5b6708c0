//! CSV and plain-text evaluation reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bucketrl_core::eval::{jamming_free_curve, CurvePoint, EvalError, EvalReport};
use bucketrl_core::terrain::TerrainKind;
use thiserror::Error;

use crate::json;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const TABLE_FILE: &str = "table.txt";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Decimal with 6 significant digits; scientific outside `[1e-5, 1e15)`.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let exp: i32 = sci.rsplit('e').next().and_then(|e| e.parse().ok()).unwrap_or(0);
    if (-5..15).contains(&exp) {
        format!("{:.*}", (5 - exp).max(0) as usize, x)
    } else {
        sci
    }
}

pub const SUMMARY_HEADER: &str =
    "policy,terrain,trials,reward_mean,reward_std,single_trial,mean_duration,mean_avg_force,jam_count,jam_rate";

pub fn summary_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.policy_id,
            r.terrain,
            r.trials,
            sig6(r.reward_mean),
            sig6(r.reward_std),
            r.single_trial,
            sig6(r.mean_duration),
            sig6(r.mean_avg_force),
            r.jam_count,
            sig6(r.jam_rate()),
        );
    }
    s
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("threshold,jamming_free_rate\n");
    for p in points {
        let _ = writeln!(s, "{},{}", sig6(p.threshold), sig6(p.jamming_free_rate));
    }
    s
}

pub fn curve_file_name(policy: &str, terrain: TerrainKind) -> String {
    format!("curve_{policy}_{terrain}.csv")
}

/// Policies as rows, terrains as columns: reward mean ± std, then jam counts.
pub fn render_table(reports: &[EvalReport]) -> String {
    let terrains: BTreeSet<TerrainKind> = reports.iter().map(|r| r.terrain).collect();
    let mut policies: Vec<&str> = Vec::new();
    for r in reports {
        if !policies.contains(&r.policy_id.as_str()) {
            policies.push(&r.policy_id);
        }
    }
    let find = |p: &str, t: TerrainKind| reports.iter().find(|r| r.policy_id == p && r.terrain == t);
    let width = 24;
    let mut s = String::new();
    let header = |s: &mut String, title: &str| {
        let _ = write!(s, "{title:<12}");
        for t in &terrains {
            let _ = write!(s, "{:>width$}", t.as_str());
        }
        s.push('\n');
    };
    header(&mut s, "reward");
    for p in &policies {
        let _ = write!(s, "{p:<12}");
        for t in &terrains {
            let cell = find(p, *t).map_or("-".to_string(), |r| format!("{} ± {}", sig6(r.reward_mean), sig6(r.reward_std)));
            let _ = write!(s, "{cell:>width$}");
        }
        s.push('\n');
    }
    s.push('\n');
    header(&mut s, "jams");
    for p in &policies {
        let _ = write!(s, "{p:<12}");
        for t in &terrains {
            let cell = find(p, *t).map_or("-".to_string(), |r| format!("{}/{}", r.jam_count, r.trials));
            let _ = write!(s, "{cell:>width$}");
        }
        s.push('\n');
    }
    s
}

fn write(path: &Path, body: &str) -> Result<(), ReportError> {
    fs::write(path, body).map_err(|source| ReportError::Io { path: path.into(), source })
}

/// Writes `summary.csv`, one curve file per report and `table.txt` into `dir`.
pub fn emit_report(reports: &[EvalReport], thresholds: &[f64], dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(dir).map_err(|source| ReportError::Io { path: dir.into(), source })?;
    let mut written = Vec::new();
    let summary = dir.join(SUMMARY_FILE);
    write(&summary, &summary_csv(reports))?;
    written.push(summary);
    for r in reports {
        let curve = jamming_free_curve(&r.max_forces(), thresholds)?;
        let path = dir.join(curve_file_name(&r.policy_id, r.terrain));
        write(&path, &curve_csv(&curve))?;
        written.push(path);
    }
    let table = dir.join(TABLE_FILE);
    write(&table, &render_table(reports))?;
    written.push(table);
    Ok(written)
}

pub fn records_file_name(policy: &str, terrain: TerrainKind) -> String {
    format!("records_{policy}_{terrain}.json")
}

/// Full report including per-trial records, reloadable by [`load_records`].
pub fn save_records(report: &EvalReport, path: &Path) -> Result<(), ReportError> {
    let bytes = json::to_pretty(report).map_err(|e| ReportError::Parse { path: path.into(), msg: e.to_string() })?;
    fs::write(path, bytes).map_err(|source| ReportError::Io { path: path.into(), source })
}

pub fn load_records(path: &Path) -> Result<EvalReport, ReportError> {
    let raw = fs::read(path).map_err(|source| ReportError::Io { path: path.into(), source })?;
    serde_json::from_slice(&raw).map_err(|e| ReportError::Parse { path: path.into(), msg: e.to_string() })
}
