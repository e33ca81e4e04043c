//! Online identification of the lumped flow coefficient.
//!
//! The reduced model is linear in its single parameter, `ΔW ≈ C'·x` with
//! `x = L^2.5·(T(L) + t_pose)`, so the least-squares estimate through the
//! origin has the closed form `Σ x·ΔW / Σ x²`. Each flow mode keeps its own
//! coefficient and is refitted over the full history after every accepted
//! observation.

use serde::{Deserialize, Serialize};

use crate::control::ValveAction;
use crate::flow::{regressor, FlowMode, ValveKinematics};

/// Smallest measured drop (mg) admitted into the observation log.
pub const STORE_THRESHOLD_MG: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub l: f64,
    pub t_pose: f64,
    pub vibration: bool,
    /// Measured mass delivered by the action, mg.
    pub delta_w: f64,
    pub step_index: u32,
}

impl Observation {
    pub fn mode(&self) -> FlowMode {
        FlowMode::from_vibration(self.vibration)
    }

    pub fn regressor(&self, kin: &ValveKinematics) -> f64 {
        regressor(kin, self.l, self.t_pose)
    }
}

/// Fitted coefficient for one flow mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeFit {
    pub coefficient: f64,
    pub n: usize,
    /// `None` when fewer than two observations or the statistic is undefined.
    pub r_squared: Option<f64>,
    /// The unconstrained optimum was negative and has been clamped to zero.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CoefficientEstimate {
    pub gravity: Option<ModeFit>,
    pub vibration: Option<ModeFit>,
}

impl CoefficientEstimate {
    pub fn get(&self, mode: FlowMode) -> Option<&ModeFit> {
        match mode {
            FlowMode::Gravity => self.gravity.as_ref(),
            FlowMode::Vibration => self.vibration.as_ref(),
        }
    }

    pub fn coefficient(&self, mode: FlowMode) -> Option<f64> {
        self.get(mode).map(|f| f.coefficient)
    }

    pub fn set(&mut self, mode: FlowMode, fit: Option<ModeFit>) {
        match mode {
            FlowMode::Gravity => self.gravity = fit,
            FlowMode::Vibration => self.vibration = fit,
        }
    }
}

/// Least-squares slope through the origin for `(x, y)` pairs.
///
/// Returns `None` for an empty set or when every regressor is zero. The
/// second element is true when a negative optimum was clamped to zero.
pub fn slope_through_origin(pairs: &[(f64, f64)]) -> Option<(f64, bool)> {
    let (sxy, sxx) = pairs
        .iter()
        .fold((0.0, 0.0), |(sxy, sxx), &(x, y)| (sxy + x * y, sxx + x * x));
    if pairs.is_empty() || sxx <= 0.0 {
        return None;
    }
    let c = sxy / sxx;
    if c < 0.0 {
        Some((0.0, true))
    } else {
        Some((c, false))
    }
}

/// Coefficient of determination of `y ≈ c·x`.
pub fn r_squared_pairs(pairs: &[(f64, f64)], c: f64) -> Option<f64> {
    if pairs.len() < 2 {
        return None;
    }
    let mean = pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64;
    let (ss_res, ss_tot) = pairs.iter().fold((0.0, 0.0), |(res, tot), &(x, y)| {
        let r = y - c * x;
        let d = y - mean;
        (res + r * r, tot + d * d)
    });
    if ss_tot == 0.0 {
        return None;
    }
    Some(1.0 - ss_res / ss_tot)
}

fn mode_pairs(
    observations: &[Observation],
    kin: &ValveKinematics,
    mode: FlowMode,
) -> Vec<(f64, f64)> {
    observations
        .iter()
        .filter(|o| o.mode() == mode)
        .map(|o| (o.regressor(kin), o.delta_w))
        .collect()
}

/// Fits `C'` for one mode over every logged observation of that mode.
/// `None` means unfitted.
pub fn fit(observations: &[Observation], kin: &ValveKinematics, mode: FlowMode) -> Option<ModeFit> {
    let pairs = mode_pairs(observations, kin, mode);
    let (coefficient, degenerate) = slope_through_origin(&pairs)?;
    Some(ModeFit {
        coefficient,
        n: pairs.len(),
        r_squared: r_squared_pairs(&pairs, coefficient),
        degenerate,
    })
}

pub fn r_squared(
    observations: &[Observation],
    kin: &ValveKinematics,
    mode: FlowMode,
    coefficient: f64,
) -> Option<f64> {
    r_squared_pairs(&mode_pairs(observations, kin, mode), coefficient)
}

/// Observation history of one trial.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservationLog {
    entries: Vec<Observation>,
}

impl ObservationLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Observation] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends the outcome of `action` when the measured drop passes the
    /// storage gate. Returns whether the log changed.
    pub fn record(&mut self, action: &ValveAction, delta_w: f64, step_index: u32) -> bool {
        if !(delta_w.is_finite() && delta_w >= STORE_THRESHOLD_MG) {
            return false;
        }
        self.entries.push(Observation {
            l: action.l,
            t_pose: action.t_pose,
            vibration: action.vibration,
            delta_w,
            step_index,
        });
        true
    }

    /// Refits both modes from the full history.
    pub fn estimate(&self, kin: &ValveKinematics) -> CoefficientEstimate {
        CoefficientEstimate {
            gravity: fit(&self.entries, kin, FlowMode::Gravity),
            vibration: fit(&self.entries, kin, FlowMode::Vibration),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn action(l: f64, t_pose: f64, vibration: bool) -> ValveAction {
        ValveAction {
            l,
            t_pose,
            vibration,
        }
    }

    /// Dense scan of the squared-residual objective over `c >= 0`.
    fn grid_argmin(pairs: &[(f64, f64)], hi: f64, n: usize) -> f64 {
        let loss = |c: f64| pairs.iter().map(|&(x, y)| (y - c * x).powi(2)).sum::<f64>();
        (0..=n)
            .map(|i| hi * i as f64 / n as f64)
            .min_by(|a, b| loss(*a).total_cmp(&loss(*b)))
            .unwrap()
    }

    #[test]
    fn single_point_fit_is_exact() {
        assert_eq!(slope_through_origin(&[(2.0, 4.0)]), Some((2.0, false)));
    }

    #[test]
    fn two_point_fit() {
        let pairs = [(1.0, 1.0), (2.0, 3.0)];
        let (c, _) = slope_through_origin(&pairs).unwrap();
        assert!((c - 1.4).abs() < 1e-15);
        let brute = grid_argmin(&pairs, 3.0, 300_000);
        assert!((c - brute).abs() < 1e-5);
    }

    #[test]
    fn empty_log_is_unfitted() {
        assert_eq!(slope_through_origin(&[]), None);
        assert!(fit(&[], &ValveKinematics::default(), FlowMode::Gravity).is_none());
    }

    #[test]
    fn negative_slope_clamps_and_flags() {
        assert_eq!(
            slope_through_origin(&[(1.0, -1.0), (2.0, -1.0)]),
            Some((0.0, true))
        );
    }

    #[test]
    fn r_squared_examples() {
        let linear = [(1.0, 3.0), (2.0, 6.0), (5.0, 15.0)];
        assert_eq!(r_squared_pairs(&linear, 3.0), Some(1.0));

        let r2 = r_squared_pairs(&[(1.0, 1.0), (2.0, 3.0)], 1.4).unwrap();
        assert!((r2 - 0.9).abs() < 1e-12, "{r2}");

        assert_eq!(r_squared_pairs(&[(1.0, 1.0)], 1.0), None);
        // zero variance, nonzero residual
        assert_eq!(r_squared_pairs(&[(1.0, 2.0), (2.0, 2.0)], 1.0), None);
    }

    #[test]
    fn storage_gate() {
        let mut log = ObservationLog::new();
        let a = action(50.0, 1.0, false);
        assert!(!log.record(&a, 0.4, 0));
        assert!(!log.record(&a, 0.0, 1));
        assert!(!log.record(&a, -0.3, 2));
        assert!(!log.record(&a, f64::NAN, 3));
        assert!(log.is_empty());
        assert!(log.record(&a, 0.5, 4));
        assert_eq!(log.len(), 1);
        assert_eq!(log.entries()[0].step_index, 4);
    }

    #[test]
    fn modes_do_not_mix() {
        let kin = ValveKinematics::default();
        let mut log = ObservationLog::new();
        let g = action(100.0, 2.0, false);
        let v = action(100.0, 2.0, true);
        let xg = regressor(&kin, 100.0, 2.0);
        log.record(&g, 3.0 * xg, 0);
        log.record(&v, 7.0 * xg, 1);
        log.record(&v, 7.0 * xg, 2);
        let est = log.estimate(&kin);
        assert!((est.gravity.unwrap().coefficient - 3.0).abs() < 1e-12);
        assert!((est.vibration.unwrap().coefficient - 7.0).abs() < 1e-12);
        assert_eq!(est.gravity.unwrap().n, 1);
        assert_eq!(est.vibration.unwrap().n, 2);
        assert_eq!(est.gravity.unwrap().r_squared, None);
    }

    proptest! {
        #[test]
        fn exact_data_recovers_coefficient(
            c0 in 1e-6f64..10.0,
            xs in prop::collection::vec(1e-3f64..1e6, 1..40),
        ) {
            let pairs: Vec<_> = xs.iter().map(|&x| (x, c0 * x)).collect();
            let (c, degenerate) = slope_through_origin(&pairs).unwrap();
            prop_assert!(!degenerate);
            prop_assert!(((c - c0) / c0).abs() < 1e-12);
        }

        #[test]
        fn consistent_observation_is_a_fixed_point(
            pts in prop::collection::vec((1e-2f64..100.0, 0.0f64..500.0), 1..20),
            x_new in 1e-2f64..100.0,
        ) {
            prop_assume!(pts.iter().any(|p| p.1 > 0.0));
            let mut pairs = pts.clone();
            let (c, _) = slope_through_origin(&pairs).unwrap();
            pairs.push((x_new, c * x_new));
            let (c2, _) = slope_through_origin(&pairs).unwrap();
            prop_assert!((c2 - c).abs() <= 1e-9 * c.max(1e-12));
        }
    }
}
