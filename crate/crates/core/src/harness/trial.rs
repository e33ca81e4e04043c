use serde::{Deserialize, Serialize};

use super::config::{Condition, ControllerKind};
use super::metrics::TrialOutcome;
use crate::control::{
    Decision, DispenseController, ModelController, PidController, StepKind, TrialStatus,
};
use crate::error::Result;
use crate::flow::FlowMode;
use crate::plant::{trial_seed, Plant, SimPlant};

/// One trace row. Row 0 is the initial reading before any action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: u32,
    pub l: f64,
    pub t_pose: f64,
    pub vibration: bool,
    pub predicted: Option<f64>,
    pub measured_delta: Option<f64>,
    /// Coefficients in force when the action was chosen.
    pub cprime_gravity: Option<f64>,
    pub cprime_vibration: Option<f64>,
    pub w_error: f64,
    pub sim_time: f64,
    pub kind: Option<StepKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: String,
    pub trial_index: u32,
    pub seed: u64,
    pub condition: Condition,
    pub rows: Vec<StepRow>,
    /// Last balance reading, mg.
    pub final_mass_mg: f64,
    pub status: TrialStatus,
    pub steps: u32,
    pub sim_time_s: f64,
    /// Set when the trial could not be simulated.
    pub error: Option<String>,
}

impl TrialRecord {
    pub fn outcome(&self) -> TrialOutcome {
        TrialOutcome::from_rows(self.condition.target_mg, &self.rows)
    }

    /// Rows that dispensed under an executed action (excludes the initial reading).
    pub fn action_rows(&self) -> &[StepRow] {
        self.rows.get(1..).unwrap_or(&[])
    }
}

pub fn trial_id(cond: &Condition, trial_index: u32) -> String {
    format!(
        "{}_{}_{}mg_t{:03}",
        cond.powder.name,
        cond.controller.as_str(),
        cond.target_mg,
        trial_index
    )
}

fn controller_for(cond: &Condition) -> Box<dyn DispenseController> {
    match cond.controller {
        ControllerKind::ModelBased => Box::new(ModelController::new(
            cond.target_mg,
            cond.kinematics,
            cond.model,
        )),
        ControllerKind::DirectPid => Box::new(PidController::new(
            cond.target_mg,
            cond.kinematics,
            cond.pid,
        )),
    }
}

/// Runs one weighing trial to a terminal status.
///
/// Deterministic in `(suite_seed, trial_index)` and the condition.
pub fn run_trial(cond: &Condition, suite_seed: u64, trial_index: u32) -> Result<TrialRecord> {
    let seed = trial_seed(suite_seed, trial_index as u64);
    let mut plant = SimPlant::new(cond.powder.clone(), cond.kinematics, cond.balance, seed)?;
    let mut ctl = controller_for(cond);

    let mut reading = plant.tare_reading();
    let mut rows = vec![StepRow {
        step: 0,
        l: 0.0,
        t_pose: 0.0,
        vibration: false,
        predicted: None,
        measured_delta: None,
        cprime_gravity: None,
        cprime_vibration: None,
        w_error: cond.target_mg - reading,
        sim_time: plant.clock(),
        kind: None,
    }];

    loop {
        let plan = match ctl.step(reading) {
            Decision::Done(_) => break,
            Decision::Act(plan) => plan,
        };
        if plant.is_depleted() {
            ctl.abort(TrialStatus::DepletedFail);
            break;
        }
        // refitted inside step(), before the action was chosen
        let est = ctl.estimate();
        plant.execute(&plan.action)?;
        let r = plant.read_balance();
        rows.push(StepRow {
            step: ctl.steps(),
            l: plan.action.l,
            t_pose: plan.action.t_pose,
            vibration: plan.action.vibration,
            predicted: plan.predicted,
            measured_delta: Some(r.mass - reading),
            cprime_gravity: est.coefficient(FlowMode::Gravity),
            cprime_vibration: est.coefficient(FlowMode::Vibration),
            w_error: cond.target_mg - r.mass,
            sim_time: plant.clock(),
            kind: Some(plan.kind),
        });
        reading = r.mass;
    }

    Ok(TrialRecord {
        trial_id: trial_id(cond, trial_index),
        trial_index,
        seed,
        condition: cond.clone(),
        final_mass_mg: reading,
        status: ctl.status(),
        steps: rows.len() as u32 - 1,
        sim_time_s: plant.clock(),
        rows,
        error: None,
    })
}

/// Like [`run_trial`] but never fails: simulation errors become an aborted record.
pub fn run_trial_recorded(cond: &Condition, suite_seed: u64, trial_index: u32) -> TrialRecord {
    run_trial(cond, suite_seed, trial_index).unwrap_or_else(|e| TrialRecord {
        trial_id: trial_id(cond, trial_index),
        trial_index,
        seed: trial_seed(suite_seed, trial_index as u64),
        condition: cond.clone(),
        rows: Vec::new(),
        final_mass_mg: f64::NAN,
        status: TrialStatus::Aborted,
        steps: 0,
        sim_time_s: 0.0,
        error: Some(e.to_string()),
    })
}
