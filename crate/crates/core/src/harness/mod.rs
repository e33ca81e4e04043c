//! Trial and suite orchestration, metrics, artifacts and reporting.

pub mod artifacts;
pub mod config;
pub mod metrics;
pub mod report;
pub mod trial;

use rayon::prelude::*;

pub use artifacts::{SuiteManifest, SuiteSummary};
pub use config::{Condition, ControllerKind, ExperimentConfig};
pub use metrics::{
    compute_metrics, pooled_fit, ConditionSummary, MeanStd, PooledFit, TrialOutcome,
};
pub use report::{report, Report};
pub use trial::{run_trial, run_trial_recorded, StepRow, TrialRecord};

use crate::error::Result;

/// Output of [`run_suite`]: records grouped by condition in config order.
#[derive(Debug, Clone)]
pub struct SuiteRun {
    pub summary: SuiteSummary,
    pub records: Vec<Vec<TrialRecord>>,
    pub manifest: Option<SuiteManifest>,
}

impl SuiteRun {
    pub fn all_records(&self) -> impl Iterator<Item = &TrialRecord> + Clone {
        self.records.iter().flatten()
    }
}

/// Summary over already-run trials, grouped per condition.
pub fn summarize(groups: &[Vec<TrialRecord>], tolerance: f64) -> SuiteSummary {
    let conditions = groups
        .iter()
        .filter_map(|g| {
            let first = g.first()?;
            let c = &first.condition;
            let outcomes: Vec<_> = g.iter().map(TrialRecord::outcome).collect();
            Some(compute_metrics(
                &c.powder.name,
                c.controller,
                c.target_mg,
                &outcomes,
                tolerance,
            ))
        })
        .collect();
    SuiteSummary {
        conditions,
        fits: pooled_fits(groups.iter().flatten())
            .iter()
            .map(Into::into)
            .collect(),
    }
}

/// Pooled per-powder fits over the model-based trials in `records`.
pub fn pooled_fits<'a>(records: impl Iterator<Item = &'a TrialRecord> + Clone) -> Vec<PooledFit> {
    let mut powders: Vec<(&str, crate::flow::ValveKinematics)> = Vec::new();
    for r in records.clone() {
        let name = r.condition.powder.name.as_str();
        if r.condition.controller == ControllerKind::ModelBased
            && !powders.iter().any(|(p, _)| *p == name)
        {
            powders.push((name, r.condition.kinematics));
        }
    }
    powders
        .into_iter()
        .flat_map(|(powder, kin)| {
            let rows = records
                .clone()
                .filter(|r| {
                    r.condition.powder.name == powder
                        && r.condition.controller == ControllerKind::ModelBased
                })
                .flat_map(|r| r.action_rows().iter());
            pooled_fit(powder, &kin, rows)
        })
        .collect()
}

/// Runs every (powder × controller × target) condition for the configured
/// number of trials, in parallel, and persists artifacts when an output
/// directory is configured.
pub fn run_suite(config: &ExperimentConfig) -> Result<SuiteRun> {
    let conditions = config.conditions()?;
    let jobs: Vec<(usize, u32)> = (0..conditions.len())
        .flat_map(|c| (0..config.trials).map(move |t| (c, t)))
        .collect();
    let results: Vec<TrialRecord> = jobs
        .par_iter()
        .map(|&(c, t)| run_trial_recorded(&conditions[c], config.seed, t))
        .collect();

    let mut records: Vec<Vec<TrialRecord>> = vec![Vec::new(); conditions.len()];
    for ((c, _), rec) in jobs.into_iter().zip(results) {
        records[c].push(rec);
    }
    let summary = summarize(&records, config.tolerance_mg);
    let manifest = match &config.output_dir {
        Some(dir) => {
            let flat: Vec<_> = records.iter().flatten().cloned().collect();
            Some(artifacts::write_suite(dir, config, &summary, &flat)?)
        }
        None => None,
    };
    Ok(SuiteRun {
        summary,
        records,
        manifest,
    })
}
