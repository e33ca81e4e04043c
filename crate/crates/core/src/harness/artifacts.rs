//! Flat-file artifacts: per-trial trace CSVs, the summary CSV and the JSON
//! suite manifest the report is rebuilt from.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ControllerKind, ExperimentConfig};
use super::metrics::{ConditionSummary, PooledFit};
use super::trial::{StepRow, TrialRecord};
use crate::control::TrialStatus;
use crate::error::{Error, Result};
use crate::flow::ValveKinematics;

pub const TRACE_HEADER: [&str; 10] = [
    "step",
    "L",
    "t_pose_s",
    "vibration",
    "predicted_mg",
    "measured_delta_mg",
    "cprime_gravity",
    "cprime_vibration",
    "w_error_mg",
    "sim_time_s",
];

pub const SUMMARY_HEADER: [&str; 11] = [
    "powder",
    "controller",
    "target_mg",
    "trials",
    "successes",
    "dropped_mean_mg",
    "dropped_std_mg",
    "steps_mean",
    "steps_std",
    "time_mean_s",
    "time_std_s",
];

pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const TRACE_DIR: &str = "traces";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub conditions: Vec<ConditionSummary>,
    /// Pooled model fit per powder and mode, over model-based trials.
    pub fits: Vec<PooledFitSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledFitSummary {
    pub powder: String,
    pub mode: crate::flow::FlowMode,
    pub n: usize,
    pub coefficient: f64,
    pub r_squared: Option<f64>,
}

impl From<&PooledFit> for PooledFitSummary {
    fn from(f: &PooledFit) -> Self {
        Self {
            powder: f.powder.clone(),
            mode: f.mode,
            n: f.n,
            coefficient: f.coefficient,
            r_squared: f.r_squared,
        }
    }
}

/// Index entry pointing at one trial's trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEntry {
    pub trial_id: String,
    /// Relative to the artifact directory.
    pub trace: PathBuf,
    pub powder: String,
    pub controller: ControllerKind,
    pub target_mg: f64,
    pub trial_index: u32,
    pub seed: u64,
    pub status: TrialStatus,
    pub kinematics: ValveKinematics,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub config: ExperimentConfig,
    pub summary: SuiteSummary,
    pub trials: Vec<TrialEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(field: &str) -> std::result::Result<Option<f64>, std::num::ParseFloatError> {
    if field.is_empty() {
        Ok(None)
    } else {
        field.parse().map(Some)
    }
}

pub fn write_trace(path: &Path, rows: &[StepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(TRACE_HEADER).map_err(csv_err(path))?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.l.to_string(),
            r.t_pose.to_string(),
            (r.vibration as u8).to_string(),
            fmt_opt(r.predicted),
            fmt_opt(r.measured_delta),
            fmt_opt(r.cprime_gravity),
            fmt_opt(r.cprime_vibration),
            r.w_error.to_string(),
            r.sim_time.to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a trace written by [`write_trace`]. The step kind is not persisted.
pub fn read_trace(path: &Path) -> Result<Vec<StepRow>> {
    let bad = |message: String| Error::Artifact {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    if header.iter().ne(TRACE_HEADER) {
        return Err(bad(format!(
            "unexpected header `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let line = i + 2;
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse()
                .map_err(|e| bad(format!("line {line}, {}: {e}", TRACE_HEADER[k])))
        };
        let opt = |k: usize| -> Result<Option<f64>> {
            parse_opt(&rec[k]).map_err(|e| bad(format!("line {line}, {}: {e}", TRACE_HEADER[k])))
        };
        rows.push(StepRow {
            step: rec[0]
                .parse()
                .map_err(|e| bad(format!("line {line}, step: {e}")))?,
            l: num(1)?,
            t_pose: num(2)?,
            vibration: match &rec[3] {
                "0" => false,
                "1" => true,
                other => return Err(bad(format!("line {line}, vibration: `{other}`"))),
            },
            predicted: opt(4)?,
            measured_delta: opt(5)?,
            cprime_gravity: opt(6)?,
            cprime_vibration: opt(7)?,
            w_error: num(8)?,
            sim_time: num(9)?,
            kind: None,
        });
    }
    Ok(rows)
}

pub fn write_summary_csv(path: &Path, rows: &[ConditionSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(SUMMARY_HEADER).map_err(csv_err(path))?;
    for s in rows {
        w.write_record([
            s.powder.clone(),
            s.controller.as_str().to_string(),
            s.target_mg.to_string(),
            s.trials.to_string(),
            s.successes.to_string(),
            s.dropped.mean.to_string(),
            s.dropped.std.to_string(),
            s.steps.mean.to_string(),
            s.steps.std.to_string(),
            s.time.mean.to_string(),
            s.time.std.to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn trace_path(dir: &Path, record: &TrialRecord) -> PathBuf {
    dir.join(TRACE_DIR).join(format!("{}.csv", record.trial_id))
}

/// Writes every trace, the summary CSV and the manifest into `dir`.
pub fn write_suite(
    dir: &Path,
    config: &ExperimentConfig,
    summary: &SuiteSummary,
    records: &[TrialRecord],
) -> Result<SuiteManifest> {
    let traces = dir.join(TRACE_DIR);
    fs::create_dir_all(&traces).map_err(io_err(&traces))?;
    let mut trials = Vec::with_capacity(records.len());
    for rec in records {
        let path = trace_path(dir, rec);
        write_trace(&path, &rec.rows)?;
        trials.push(TrialEntry {
            trial_id: rec.trial_id.clone(),
            trace: Path::new(TRACE_DIR).join(format!("{}.csv", rec.trial_id)),
            powder: rec.condition.powder.name.clone(),
            controller: rec.condition.controller,
            target_mg: rec.condition.target_mg,
            trial_index: rec.trial_index,
            seed: rec.seed,
            status: rec.status,
            kinematics: rec.condition.kinematics,
            error: rec.error.clone(),
        });
    }
    write_summary_csv(&dir.join(SUMMARY_CSV), &summary.conditions)?;
    let manifest = SuiteManifest {
        config: config.clone(),
        summary: summary.clone(),
        trials,
    };
    write_json(&dir.join(SUMMARY_JSON), &manifest)?;
    Ok(manifest)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<SuiteManifest> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}
