use serde::{Deserialize, Serialize};

use super::{
    ActionGrid, Decision, DispenseController, LoopGuard, StepKind, StepPlan, TrialStatus,
    ValveAction, DEFAULT_MAX_STEPS, DEFAULT_TOLERANCE_MG,
};
use crate::flow::{regressor, FlowMode, ValveKinematics};
use crate::ident::{CoefficientEstimate, ObservationLog};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelControllerConfig {
    /// Fraction of the remaining error requested per step, in (0, 1].
    pub k_p: f64,
    pub grid: ActionGrid,
    pub tolerance: f64,
    pub max_steps: u32,
    /// A mode fitted from a single observation is only trusted when that
    /// drop reached this size; smaller ones wait for a second observation.
    pub single_fit_min_mg: f64,
    pub stall: StallRule,
}

impl Default for ModelControllerConfig {
    fn default() -> Self {
        Self {
            k_p: 0.5,
            grid: ActionGrid::default(),
            tolerance: DEFAULT_TOLERANCE_MG,
            max_steps: DEFAULT_MAX_STEPS,
            single_fit_min_mg: 2.0,
            stall: StallRule::default(),
        }
    }
}

/// Detects gravity flow blocked by arching: consecutive model-chosen gravity
/// steps that were predicted to deliver at least `min_predicted_mg` but
/// delivered less than `max_ratio` of the prediction. A stall engages
/// vibration for the rest of the trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StallRule {
    pub min_predicted_mg: f64,
    pub max_ratio: f64,
    /// 0 disables the rule.
    pub repeats: u32,
}

impl Default for StallRule {
    fn default() -> Self {
        Self {
            min_predicted_mg: 1.0,
            max_ratio: 0.1,
            repeats: 2,
        }
    }
}

impl StallRule {
    fn is_stalled(&self, predicted: f64, measured: f64) -> bool {
        predicted >= self.min_predicted_mg && measured < self.max_ratio * predicted
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub action: ValveAction,
    pub predicted: f64,
    /// Gravity-mode prediction at the largest action, when it was evaluated.
    pub w_test: Option<f64>,
}

/// Exhaustive search of the action grid for the drop closest to `w_target`
/// under `W = coefficient·x(L, t)`.
///
/// Ties resolve to the smaller dwell, then the smaller opening. Targets below
/// the smallest action's prediction are raised to it.
pub fn grid_argmin(
    coefficient: f64,
    kin: &ValveKinematics,
    grid: &ActionGrid,
    w_target: f64,
) -> (f64, f64, f64) {
    let floor = coefficient * regressor(kin, kin.l_min, kin.t_pose_min);
    let target = w_target.max(floor);
    let ls = ActionGrid::axis(kin.l_min, kin.l_max, grid.dl);
    let mut best = (kin.l_min, kin.t_pose_min, floor);
    let mut best_cost = f64::INFINITY;
    for t in ActionGrid::axis(kin.t_pose_min, kin.t_pose_max, grid.dt) {
        for l in ls.clone() {
            let w = coefficient * regressor(kin, l, t);
            let cost = (w - target).abs();
            if cost < best_cost {
                best_cost = cost;
                best = (l, t, w);
            }
        }
    }
    best
}

/// Chooses the next action from the current estimate.
///
/// Switches to vibration when even the largest gravity action is predicted
/// to fall short of `w_target`. Returns `Err(mode)` when the coefficient for
/// the mode that would be used has not been fitted yet.
pub fn select_action(
    estimate: &CoefficientEstimate,
    kin: &ValveKinematics,
    grid: &ActionGrid,
    w_target: f64,
    use_vibration: bool,
) -> Result<Selection, FlowMode> {
    let mut vibration = use_vibration;
    let mut w_test = None;
    if !vibration {
        let c = estimate
            .coefficient(FlowMode::Gravity)
            .ok_or(FlowMode::Gravity)?;
        let test = c * regressor(kin, kin.l_max, kin.t_pose_max);
        w_test = Some(test);
        if test < w_target {
            vibration = true;
        }
    }
    let mode = FlowMode::from_vibration(vibration);
    let c = estimate.coefficient(mode).ok_or(mode)?;
    let (l, t_pose, predicted) = grid_argmin(c, kin, grid, w_target);
    Ok(Selection {
        action: ValveAction {
            l,
            t_pose,
            vibration,
        },
        predicted,
        w_test,
    })
}

/// Model-based dispensing with online identification and a sticky
/// vibration switch.
#[derive(Debug, Clone)]
pub struct ModelController {
    kin: ValveKinematics,
    config: ModelControllerConfig,
    guard: LoopGuard,
    use_vibration: bool,
    log: ObservationLog,
    estimate: CoefficientEstimate,
    last_action: Option<ValveAction>,
    last_plan: Option<StepPlan>,
    stalls: u32,
    last_reading: f64,
    last_target: f64,
    gravity_probes: u32,
    vibration_probes: u32,
}

impl ModelController {
    pub fn new(goal: f64, kin: ValveKinematics, config: ModelControllerConfig) -> Self {
        Self {
            kin,
            config,
            guard: LoopGuard::new(goal, config.tolerance, config.max_steps),
            use_vibration: false,
            log: ObservationLog::new(),
            estimate: CoefficientEstimate::default(),
            last_action: None,
            last_plan: None,
            stalls: 0,
            last_reading: 0.0,
            last_target: 0.0,
            gravity_probes: 0,
            vibration_probes: 0,
        }
    }

    pub fn log(&self) -> &ObservationLog {
        &self.log
    }

    pub fn use_vibration(&self) -> bool {
        self.use_vibration
    }

    /// Per-step dispense goal computed on the last non-terminal step.
    pub fn last_target(&self) -> f64 {
        self.last_target
    }

    fn probe(&mut self) -> ValveAction {
        let kin = &self.kin;
        let dl = self.config.grid.dl;
        // smallest-first, skipping the L_min point itself
        let l_steps = ActionGrid::axis(kin.l_min, kin.l_max, dl).count() as u32 - 1;
        if !self.use_vibration {
            if self.gravity_probes < l_steps {
                self.gravity_probes += 1;
                return ValveAction {
                    l: kin.l_min + self.gravity_probes as f64 * dl,
                    t_pose: kin.t_pose_min,
                    vibration: false,
                };
            }
            // nothing measurable by gravity over the whole opening range
            self.use_vibration = true;
        }
        self.vibration_probes += 1;
        let i = self.vibration_probes;
        if i <= l_steps {
            ValveAction {
                l: kin.l_min + i as f64 * dl,
                t_pose: kin.t_pose_min,
                vibration: true,
            }
        } else {
            let extra = (i - l_steps) as f64;
            ValveAction {
                l: kin.l_min + l_steps as f64 * dl,
                t_pose: (kin.t_pose_min + extra * self.config.grid.dt).min(kin.t_pose_max),
                vibration: true,
            }
        }
    }

    /// The current estimate without modes that rest on one small drop,
    /// which may be balance noise.
    fn usable_estimate(&self) -> CoefficientEstimate {
        let mut est = self.estimate;
        for mode in [FlowMode::Gravity, FlowMode::Vibration] {
            if est.get(mode).is_some_and(|f| f.n < 2) {
                let confirmed = self
                    .log
                    .entries()
                    .iter()
                    .any(|o| o.mode() == mode && o.delta_w >= self.config.single_fit_min_mg);
                if !confirmed {
                    est.set(mode, None);
                }
            }
        }
        est
    }

    fn track_stall(&mut self, delta: f64) {
        let rule = self.config.stall;
        match self.last_plan {
            Some(StepPlan {
                kind: StepKind::Model,
                predicted: Some(p),
                action,
            }) if !action.vibration && rule.repeats > 0 => {
                if rule.is_stalled(p, delta) {
                    self.stalls += 1;
                    if self.stalls >= rule.repeats {
                        self.use_vibration = true;
                    }
                } else {
                    self.stalls = 0;
                }
            }
            _ => {}
        }
    }

    /// True once arching was detected and vibration engaged because of it.
    pub fn stalled(&self) -> bool {
        self.stalls >= self.config.stall.repeats && self.config.stall.repeats > 0
    }

    fn emit(&mut self, plan: StepPlan) -> Decision {
        self.guard.steps += 1;
        self.last_action = Some(plan.action);
        self.last_plan = Some(plan);
        Decision::Act(plan)
    }
}

impl DispenseController for ModelController {
    fn step(&mut self, reading: f64) -> Decision {
        if let Some(status) = self.status().is_terminal().then_some(self.status()) {
            return Decision::Done(status);
        }
        if reading.is_finite() {
            if let Some(action) = self.last_action {
                let delta = reading - self.last_reading;
                if self.log.record(&action, delta, self.guard.steps) {
                    self.estimate = self.log.estimate(&self.kin);
                }
                self.track_stall(delta);
            }
            self.last_reading = reading;
        }
        if let Some(status) = self.guard.check(reading) {
            return Decision::Done(status);
        }

        let w_target = self.config.k_p * self.guard.error;
        self.last_target = w_target;
        match select_action(
            &self.usable_estimate(),
            &self.kin,
            &self.config.grid,
            w_target,
            self.use_vibration,
        ) {
            Ok(sel) => {
                self.use_vibration = sel.action.vibration;
                self.emit(StepPlan {
                    action: sel.action,
                    predicted: Some(sel.predicted),
                    kind: StepKind::Model,
                })
            }
            Err(mode) => {
                if mode.is_vibration() {
                    self.use_vibration = true;
                }
                let action = self.probe();
                self.emit(StepPlan {
                    action,
                    predicted: None,
                    kind: StepKind::Probe,
                })
            }
        }
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

    fn estimate(&self) -> CoefficientEstimate {
        self.estimate
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ident::ModeFit;
    use proptest::prelude::*;

    fn fitted(c: f64) -> Option<ModeFit> {
        Some(ModeFit {
            coefficient: c,
            n: 1,
            r_squared: None,
            degenerate: false,
        })
    }

    fn estimate(g: Option<f64>, v: Option<f64>) -> CoefficientEstimate {
        CoefficientEstimate {
            gravity: g.and_then(fitted),
            vibration: v.and_then(fitted),
        }
    }

    /// Independent scan: materialise every candidate and sort by (cost, t, L).
    fn brute_force(c: f64, kin: &ValveKinematics, grid: &ActionGrid, target: f64) -> (f64, f64) {
        let n_l = ((kin.l_max - kin.l_min) / grid.dl + 1e-9).floor() as usize;
        let n_t = ((kin.t_pose_max - kin.t_pose_min) / grid.dt + 1e-9).floor() as usize;
        let floor = c * regressor(kin, kin.l_min, kin.t_pose_min);
        let target = if target < floor { floor } else { target };
        let mut all = Vec::new();
        for i in 0..=n_l {
            for j in 0..=n_t {
                let l = kin.l_min + i as f64 * grid.dl;
                let t = kin.t_pose_min + j as f64 * grid.dt;
                let w = c * l.powf(2.5) * (l / kin.travel_rate + t);
                all.push(((w - target).abs(), t, l));
            }
        }
        all.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then(a.1.total_cmp(&b.1))
                .then(a.2.total_cmp(&b.2))
        });
        (all[0].2, all[0].1)
    }

    #[test]
    fn four_point_grid_matches_enumeration() {
        let kin = ValveKinematics {
            l_min: 10.0,
            l_max: 20.0,
            t_pose_min: 1.0,
            t_pose_max: 2.0,
            ..ValveKinematics::default()
        };
        let grid = ActionGrid { dl: 10.0, dt: 1.0 };
        // candidates: x(10,1)=347.85, x(20,1)=2146.6, x(10,2)=664.08, x(20,2)=3935.5
        // drops at C'=0.001: 0.348, 2.147, 0.664, 3.936 -> nearest to 1.0 is (10, 2)
        let (l, t, w) = grid_argmin(0.001, &kin, &grid, 1.0);
        assert_eq!((l, t), (10.0, 2.0));
        assert!((w - 0.664_078).abs() < 1e-6);
        assert_eq!(brute_force(0.001, &kin, &grid, 1.0), (10.0, 2.0));
    }

    #[test]
    fn tiny_target_picks_smallest_action() {
        let kin = ValveKinematics::default();
        let (l, t, _) = grid_argmin(3e-4, &kin, &ActionGrid::default(), f64::MIN_POSITIVE);
        assert_eq!((l, t), (kin.l_min, kin.t_pose_min));
    }

    #[test]
    fn switches_to_vibration_when_gravity_cannot_reach() {
        let kin = ValveKinematics::default();
        let grid = ActionGrid::default();
        let est = estimate(Some(1e-6), Some(1e-4));
        let w_max = 1e-6 * regressor(&kin, kin.l_max, kin.t_pose_max);
        let sel = select_action(&est, &kin, &grid, w_max * 1.5, false).unwrap();
        assert!(sel.action.vibration);
        assert_eq!(sel.w_test, Some(w_max));

        let sel = select_action(&est, &kin, &grid, w_max * 0.5, false).unwrap();
        assert!(!sel.action.vibration);
    }

    #[test]
    fn unfitted_modes_request_bootstrap() {
        let kin = ValveKinematics::default();
        let grid = ActionGrid::default();
        assert_eq!(
            select_action(&estimate(None, None), &kin, &grid, 10.0, false),
            Err(FlowMode::Gravity)
        );
        assert_eq!(
            select_action(&estimate(Some(1e-9), None), &kin, &grid, 10.0, false),
            Err(FlowMode::Vibration)
        );
        assert_eq!(
            select_action(&estimate(None, None), &kin, &grid, 10.0, true),
            Err(FlowMode::Vibration)
        );
    }

    #[test]
    fn repeated_no_flow_engages_vibration() {
        let kin = ValveKinematics::default();
        let mut c = ModelController::new(50.0, kin, Default::default());
        let Decision::Act(_) = c.step(0.0) else {
            panic!()
        };
        // probe delivered 5 mg, fitted gravity model from here on
        let Decision::Act(a) = c.step(5.0) else {
            panic!()
        };
        assert_eq!(a.kind, StepKind::Model);
        assert!(a.predicted.unwrap() >= 1.0);
        let Decision::Act(b) = c.step(5.0) else {
            panic!()
        };
        assert!(!b.action.vibration);
        assert!(!c.stalled());
        // second zero-drop in a row
        let Decision::Act(v) = c.step(5.0) else {
            panic!()
        };
        assert!(c.stalled());
        assert!(v.action.vibration);
        assert_eq!(v.kind, StepKind::Probe);
    }

    #[test]
    fn one_small_drop_keeps_probing() {
        let kin = ValveKinematics::default();
        let mut c = ModelController::new(50.0, kin, Default::default());
        let _ = c.step(0.0);
        let Decision::Act(p) = c.step(0.6) else {
            panic!()
        };
        assert_eq!(c.log().len(), 1);
        assert!(c.estimate().gravity.is_some());
        assert_eq!(p.kind, StepKind::Probe);
        assert_eq!(p.action.l, 15.0);
        let Decision::Act(m) = c.step(1.4) else {
            panic!()
        };
        assert_eq!(m.kind, StepKind::Model);
    }

    #[test]
    fn partial_flow_resets_stall_count() {
        let kin = ValveKinematics::default();
        let mut c = ModelController::new(50.0, kin, Default::default());
        let _ = c.step(0.0);
        let _ = c.step(5.0);
        let Decision::Act(a) = c.step(5.0) else {
            panic!()
        };
        let Decision::Act(b) = c.step(5.0 + 0.5 * a.predicted.unwrap()) else {
            panic!()
        };
        assert!(!b.action.vibration);
        assert!(!c.stalled());
    }

    #[test]
    fn no_action_inside_tolerance() {
        let mut c = ModelController::new(500.0, ValveKinematics::default(), Default::default());
        assert_eq!(c.step(499.0), Decision::Done(TrialStatus::Success));
        assert_eq!(c.steps(), 0);
    }

    #[test]
    fn small_drop_not_stored() {
        let kin = ValveKinematics::default();
        let mut c = ModelController::new(20.0, kin, Default::default());
        let Decision::Act(first) = c.step(0.0) else {
            panic!()
        };
        assert_eq!(first.kind, StepKind::Probe);
        let Decision::Act(second) = c.step(0.4) else {
            panic!()
        };
        assert!(c.log().is_empty());
        assert!(c.estimate().gravity.is_none());
        assert_eq!(second.kind, StepKind::Probe);
        assert!(second.action.l > first.action.l);
    }

    #[test]
    fn scripted_bootstrap_then_model_step() {
        let kin = ValveKinematics::default();
        let config = ModelControllerConfig::default();
        let mut c = ModelController::new(20.0, kin, config);
        let Decision::Act(probe) = c.step(0.0) else {
            panic!()
        };
        assert_eq!((probe.action.l, probe.action.t_pose), (10.0, 0.5));
        let Decision::Act(plan) = c.step(5.0) else {
            panic!()
        };

        // x(10, 0.5) = 10^2.5 * 0.6 = 189.7366596...
        let expected_c = 5.0 / (10f64.powf(2.5) * 0.6);
        let got = c.estimate().gravity.unwrap().coefficient;
        assert!((got - expected_c).abs() / expected_c < 1e-14);
        assert!((c.last_target() - 7.5).abs() < 1e-12);

        assert_eq!(plan.kind, StepKind::Model);
        let predicted = plan.predicted.unwrap();
        // Cell resolution around the chosen point bounds the miss.
        let a = plan.action;
        let cell = [
            (a.l + config.grid.dl).min(kin.l_max),
            (a.l - config.grid.dl).max(kin.l_min),
        ]
        .iter()
        .flat_map(|&l| {
            [a.t_pose + config.grid.dt, a.t_pose - config.grid.dt]
                .into_iter()
                .map(move |t| t.clamp(kin.t_pose_min, kin.t_pose_max))
                .map(move |t| (got * regressor(&kin, l, t) - predicted).abs())
        })
        .fold(0.0, f64::max);
        assert!(
            (predicted - 7.5).abs() <= cell,
            "{predicted} vs 7.5 (cell {cell})"
        );
    }

    #[test]
    fn cohesive_probe_escalates_then_vibrates() {
        let kin = ValveKinematics::default();
        let mut c = ModelController::new(100.0, kin, Default::default());
        let mut actions = Vec::new();
        for _ in 0..45 {
            match c.step(0.0) {
                Decision::Act(p) => actions.push(p.action),
                Decision::Done(s) => panic!("{s:?}"),
            }
        }
        let gravity: Vec<_> = actions.iter().filter(|a| !a.vibration).collect();
        assert_eq!(gravity.len(), 41);
        assert_eq!(gravity.last().unwrap().l, kin.l_max);
        assert!(actions[41].vibration);
        assert_eq!(actions[41].l, 10.0);
        assert!(c.use_vibration());
    }

    #[test]
    fn overshoot_terminates() {
        let mut c = ModelController::new(20.0, ValveKinematics::default(), Default::default());
        c.step(0.0);
        assert_eq!(c.step(30.0), Decision::Done(TrialStatus::OvershootFail));
        assert_eq!(c.step(30.0), Decision::Done(TrialStatus::OvershootFail));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn argmin_matches_brute_force(
            c in 1e-6f64..1e-2,
            target in 0.0f64..5000.0,
            l_min in 0.0f64..20.0,
            l_span in 10.0f64..300.0,
            t_min in 0.0f64..2.0,
            t_span in 1.0f64..30.0,
            nl in 1usize..100,
            nt in 1usize..100,
        ) {
            let kin = ValveKinematics {
                l_min,
                l_max: l_min + l_span,
                t_pose_min: t_min,
                t_pose_max: t_min + t_span,
                ..ValveKinematics::default()
            };
            let grid = ActionGrid { dl: l_span / nl as f64, dt: t_span / nt as f64 };
            let (l, t, _) = grid_argmin(c, &kin, &grid, target);
            prop_assert_eq!((l, t), brute_force(c, &kin, &grid, target));
        }
    }
}
