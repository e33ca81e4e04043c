//! Step-wise dispensing policies.
//!
//! Both controllers are driven the same way: the caller feeds the latest
//! stabilized balance reading into [`DispenseController::step`] and either
//! executes the returned action or stops on a terminal status.

mod model;
mod pid;

use serde::{Deserialize, Serialize};

use crate::ident::CoefficientEstimate;

pub use model::{
    grid_argmin, select_action, ModelController, ModelControllerConfig, Selection, StallRule,
};
pub use pid::{pid_step, PidConfig, PidController, PidGains, PidState};

/// Default acceptance band around the goal, mg.
pub const DEFAULT_TOLERANCE_MG: f64 = 2.0;
pub const DEFAULT_MAX_STEPS: u32 = 100;

/// One dispensing command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValveAction {
    pub l: f64,
    pub t_pose: f64,
    pub vibration: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrialStatus {
    Running,
    Success,
    OvershootFail,
    StepLimitFail,
    DepletedFail,
    /// The balance produced a non-finite reading.
    Aborted,
}

impl TrialStatus {
    pub fn is_terminal(self) -> bool {
        self != TrialStatus::Running
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrialStatus::Running => "running",
            TrialStatus::Success => "success",
            TrialStatus::OvershootFail => "overshoot-fail",
            TrialStatus::StepLimitFail => "step-limit-fail",
            TrialStatus::DepletedFail => "depleted-fail",
            TrialStatus::Aborted => "aborted",
        }
    }
}

/// How an emitted action was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    /// Exploration before a coefficient exists for the active mode.
    Probe,
    /// Grid search over the fitted model.
    Model,
    Pid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    pub action: ValveAction,
    /// Model-predicted drop, when a fitted model chose the action.
    pub predicted: Option<f64>,
    pub kind: StepKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    Act(StepPlan),
    Done(TrialStatus),
}

/// Grid resolution for the action search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionGrid {
    pub dl: f64,
    pub dt: f64,
}

impl Default for ActionGrid {
    fn default() -> Self {
        Self { dl: 5.0, dt: 0.5 }
    }
}

impl ActionGrid {
    /// Points `lo, lo + step, ...` not exceeding `hi`.
    pub fn axis(lo: f64, hi: f64, step: f64) -> impl Iterator<Item = f64> + Clone {
        let n = ((hi - lo) / step + 1e-9).floor().max(0.0) as usize;
        (0..=n).map(move |i| lo + i as f64 * step)
    }
}

/// Termination bookkeeping shared by both controllers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopGuard {
    pub goal: f64,
    pub tolerance: f64,
    pub max_steps: u32,
    pub steps: u32,
    pub status: TrialStatus,
    pub error: f64,
}

impl LoopGuard {
    pub fn new(goal: f64, tolerance: f64, max_steps: u32) -> Self {
        Self {
            goal,
            tolerance,
            max_steps,
            steps: 0,
            status: TrialStatus::Running,
            error: goal,
        }
    }

    /// Updates the error from `reading` and returns a terminal status if the
    /// loop must stop before choosing another action.
    pub fn check(&mut self, reading: f64) -> Option<TrialStatus> {
        if self.status.is_terminal() {
            return Some(self.status);
        }
        let status = if !reading.is_finite() {
            Some(TrialStatus::Aborted)
        } else {
            self.error = self.goal - reading;
            if self.error.abs() < self.tolerance {
                Some(TrialStatus::Success)
            } else if self.error <= -self.tolerance {
                // powder cannot be taken back
                Some(TrialStatus::OvershootFail)
            } else if self.steps >= self.max_steps {
                Some(TrialStatus::StepLimitFail)
            } else {
                None
            }
        };
        if let Some(s) = status {
            self.status = s;
        }
        status
    }
}

pub trait DispenseController {
    fn step(&mut self, reading: f64) -> Decision;

    fn status(&self) -> TrialStatus;

    /// Forces a terminal status decided outside the policy (e.g. empty hopper).
    fn abort(&mut self, status: TrialStatus);

    fn steps(&self) -> u32;

    fn error(&self) -> f64;

    fn estimate(&self) -> CoefficientEstimate {
        CoefficientEstimate::default()
    }
}
