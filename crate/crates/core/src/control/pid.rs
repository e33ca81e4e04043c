use serde::{Deserialize, Serialize};

use super::{
    Decision, DispenseController, LoopGuard, StepKind, StepPlan, TrialStatus, ValveAction,
    DEFAULT_MAX_STEPS, DEFAULT_TOLERANCE_MG,
};
use crate::flow::ValveKinematics;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidGains {
    pub k_p: f64,
    pub k_i: f64,
    pub k_d: f64,
}

/// Direct error-to-valve baseline. The scalar output is mapped onto the
/// opening command through `l_per_mg`; dwell is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidConfig {
    pub gains: PidGains,
    /// Anti-windup bound on the error accumulator, mg·steps.
    pub integral_limit: f64,
    pub t_pose_fixed: f64,
    pub l_per_mg: f64,
    pub vibration: bool,
    pub tolerance: f64,
    pub max_steps: u32,
}

impl Default for PidConfig {
    fn default() -> Self {
        // Frozen profile, see profiles/pid_glass_500mg.json.
        Self {
            gains: PidGains {
                k_p: 1.0,
                k_i: 0.04,
                k_d: 0.0,
            },
            integral_limit: 10000.0,
            t_pose_fixed: 3.0,
            l_per_mg: 0.2,
            vibration: false,
            tolerance: DEFAULT_TOLERANCE_MG,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: Option<f64>,
}

/// One PID update. The derivative term is zero on the first call.
pub fn pid_step(
    state: &mut PidState,
    config: &PidConfig,
    kin: &ValveKinematics,
    error: f64,
) -> ValveAction {
    let g = config.gains;
    state.integral = (state.integral + error).clamp(-config.integral_limit, config.integral_limit);
    let derivative = state.prev_error.map_or(0.0, |prev| error - prev);
    state.prev_error = Some(error);
    let u = g.k_p * error + g.k_i * state.integral + g.k_d * derivative;
    ValveAction {
        l: (config.l_per_mg * u).clamp(kin.l_min, kin.l_max),
        t_pose: config.t_pose_fixed.clamp(kin.t_pose_min, kin.t_pose_max),
        vibration: config.vibration,
    }
}

#[derive(Debug, Clone)]
pub struct PidController {
    kin: ValveKinematics,
    config: PidConfig,
    guard: LoopGuard,
    state: PidState,
}

impl PidController {
    pub fn new(goal: f64, kin: ValveKinematics, config: PidConfig) -> Self {
        Self {
            kin,
            config,
            guard: LoopGuard::new(goal, config.tolerance, config.max_steps),
            state: PidState::default(),
        }
    }

    pub fn state(&self) -> &PidState {
        &self.state
    }
}

impl DispenseController for PidController {
    fn step(&mut self, reading: f64) -> Decision {
        if let Some(status) = self.guard.check(reading) {
            return Decision::Done(status);
        }
        let action = pid_step(&mut self.state, &self.config, &self.kin, self.guard.error);
        self.guard.steps += 1;
        Decision::Act(StepPlan {
            action,
            predicted: None,
            kind: StepKind::Pid,
        })
    }

    fn status(&self) -> TrialStatus {
        self.guard.status
    }

    fn abort(&mut self, status: TrialStatus) {
        self.guard.status = status;
    }

    fn steps(&self) -> u32 {
        self.guard.steps
    }

    fn error(&self) -> f64 {
        self.guard.error
    }
}
