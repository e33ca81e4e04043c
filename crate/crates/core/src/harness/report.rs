//! Rebuilds result tables and the pooled model-fit diagnostics from a
//! suite's artifact directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::artifacts::{self, read_manifest, read_trace, SUMMARY_JSON};
use super::config::ControllerKind;
use super::metrics::{compute_metrics, pooled_fit, ConditionSummary, PooledFit, TrialOutcome};
use super::trial::StepRow;
use crate::error::{Error, Result};

pub const REPORT_DIR: &str = "report";

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub conditions: Vec<ConditionSummary>,
    pub fits: Vec<PooledFit>,
    /// Per-file problems encountered while loading artifacts.
    pub problems: Vec<String>,
    pub text: String,
}

impl Report {
    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    fn no_data(dir: &Path) -> Self {
        Self {
            conditions: Vec::new(),
            fits: Vec::new(),
            problems: Vec::new(),
            text: format!("no data: {} holds no {SUMMARY_JSON}\n", dir.display()),
        }
    }
}

type Column<'a> = (&'a str, &'a dyn Fn(&ConditionSummary) -> String);

fn cell(m: f64, s: f64, digits: usize) -> String {
    if m.is_nan() {
        "n/a".to_string()
    } else {
        format!("{m:.digits$} ± {s:.digits$}")
    }
}

/// Renders the success/dropped-mass table and the step/time table.
pub fn render_tables(conditions: &[ConditionSummary]) -> String {
    let mut targets: Vec<f64> = conditions.iter().map(|c| c.target_mg).collect();
    targets.sort_by(f64::total_cmp);
    targets.dedup();
    let mut blocks: Vec<(&str, ControllerKind)> = Vec::new();
    for c in conditions {
        if !blocks.contains(&(c.powder.as_str(), c.controller)) {
            blocks.push((c.powder.as_str(), c.controller));
        }
    }
    let find = |b: &(&str, ControllerKind), t: f64| {
        conditions
            .iter()
            .find(|c| c.powder == b.0 && c.controller == b.1 && c.target_mg == t)
    };
    let header = {
        let mut h = format!("{:<16}", "");
        for t in &targets {
            let _ = write!(h, "{:>20}", format!("{t} mg"));
        }
        h
    };
    let mut out = String::new();
    let mut table = |title: &str, rows: &[Column]| {
        let _ = writeln!(out, "{title}\n{header}");
        for b in &blocks {
            let _ = writeln!(out, "{} / {}", b.0, b.1.as_str());
            for (label, f) in rows {
                let mut line = format!("  {label:<14}");
                for &t in &targets {
                    let v = find(b, t).map(f).unwrap_or_else(|| "N/A".into());
                    let _ = write!(line, "{v:>20}");
                }
                let _ = writeln!(out, "{line}");
            }
        }
        let _ = writeln!(out);
    };
    table(
        "Success rate and dropped mass",
        &[
            ("Success rate", &|c| format!("{}/{}", c.successes, c.trials)),
            ("Dropped [mg]", &|c| cell(c.dropped.mean, c.dropped.std, 1)),
        ],
    );
    table(
        "Step counts and simulated time",
        &[
            ("Step", &|c| cell(c.steps.mean, c.steps.std, 1)),
            ("Time [s]", &|c| cell(c.time.mean, c.time.std, 0)),
        ],
    );
    out
}

pub fn render_fits(fits: &[PooledFit]) -> String {
    let mut out = String::from("Pooled model fit (measured vs predicted)\n");
    for f in fits {
        let r2 = f.r_squared.map_or("n/a".to_string(), |r| format!("{r:.4}"));
        let _ = writeln!(
            out,
            "  {:<12} {:<9} n={:<5} C'={:.6e}  R²={r2}",
            f.powder,
            format!("{:?}", f.mode).to_lowercase(),
            f.n,
            f.coefficient
        );
    }
    out
}

fn write_fit_files(dir: &Path, fits: &[PooledFit]) -> Result<()> {
    let csv_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::Csv { path, source }
    };
    let path = dir.join("fits.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["powder", "mode", "n", "cprime", "r_squared"])
        .map_err(csv_err(&path))?;
    for f in fits {
        w.write_record([
            f.powder.clone(),
            format!("{:?}", f.mode).to_lowercase(),
            f.n.to_string(),
            f.coefficient.to_string(),
            f.r_squared.map(|r| r.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;

    let path = dir.join("fit_points.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["powder", "mode", "measured_mg", "predicted_mg"])
        .map_err(csv_err(&path))?;
    for f in fits {
        let mode = format!("{:?}", f.mode).to_lowercase();
        for (m, p) in &f.points {
            w.write_record([f.powder.clone(), mode.clone(), m.to_string(), p.to_string()])
                .map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(|source| Error::Io { path, source })
}

/// Loads a suite's artifacts, recomputes every statistic from the trace
/// files, and writes `report/` next to them.
pub fn report(dir: &Path) -> Result<Report> {
    let manifest_path = dir.join(SUMMARY_JSON);
    if !manifest_path.exists() {
        return Ok(Report::no_data(dir));
    }
    let manifest = read_manifest(&manifest_path)?;
    let tolerance = manifest.config.tolerance_mg;

    let mut problems = Vec::new();
    let mut groups: Vec<((String, ControllerKind, f64), Vec<TrialOutcome>)> = Vec::new();
    let mut model_rows: Vec<(String, crate::flow::ValveKinematics, Vec<StepRow>)> = Vec::new();
    for entry in &manifest.trials {
        let path = dir.join(&entry.trace);
        let rows = match read_trace(&path) {
            Ok(rows) => rows,
            Err(e) => {
                problems.push(e.to_string());
                Vec::new()
            }
        };
        let key = (entry.powder.clone(), entry.controller, entry.target_mg);
        let outcome = TrialOutcome::from_rows(entry.target_mg, &rows);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(outcome),
            None => groups.push((key, vec![outcome])),
        }
        if entry.controller == ControllerKind::ModelBased {
            let action_rows = rows.into_iter().skip(1);
            match model_rows.iter_mut().find(|(p, _, _)| *p == entry.powder) {
                Some((_, _, v)) => v.extend(action_rows),
                None => model_rows.push((
                    entry.powder.clone(),
                    entry.kinematics,
                    action_rows.collect(),
                )),
            }
        }
    }

    let conditions: Vec<_> = groups
        .iter()
        .map(|((p, c, t), o)| compute_metrics(p, *c, *t, o, tolerance))
        .collect();
    let fits: Vec<_> = model_rows
        .iter()
        .flat_map(|(p, kin, rows)| pooled_fit(p, kin, rows.iter()))
        .collect();

    let mut text = render_tables(&conditions);
    text.push_str(&render_fits(&fits));
    for p in &problems {
        let _ = writeln!(text, "problem: {p}");
    }

    let out = dir.join(REPORT_DIR);
    fs::create_dir_all(&out).map_err(|source| Error::Io {
        path: out.clone(),
        source,
    })?;
    artifacts::write_summary_csv(&out.join("summary.csv"), &conditions)?;
    write_fit_files(&out, &fits)?;
    fs::write(out.join("tables.txt"), &text).map_err(|source| Error::Io {
        path: out.join("tables.txt"),
        source,
    })?;

    Ok(Report {
        conditions,
        fits,
        problems,
        text,
    })
}
