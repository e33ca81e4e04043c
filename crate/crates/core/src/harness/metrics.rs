use serde::{Deserialize, Serialize};

use super::config::ControllerKind;
use super::trial::StepRow;
use crate::flow::{FlowMode, ValveKinematics};
use crate::ident::{r_squared_pairs, slope_through_origin, STORE_THRESHOLD_MG};

/// The per-trial quantities the tables aggregate, derivable from a trace alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub target_mg: f64,
    pub final_mass_mg: f64,
    pub steps: u32,
    pub sim_time_s: f64,
}

impl TrialOutcome {
    pub fn from_rows(target_mg: f64, rows: &[StepRow]) -> Self {
        match rows.last() {
            Some(last) => Self {
                target_mg,
                final_mass_mg: target_mg - last.w_error,
                steps: rows.len() as u32 - 1,
                sim_time_s: last.sim_time,
            },
            None => Self {
                target_mg,
                final_mass_mg: f64::NAN,
                steps: 0,
                sim_time_s: 0.0,
            },
        }
    }

    pub fn completed(&self) -> bool {
        self.final_mass_mg.is_finite()
    }

    pub fn within(&self, tolerance: f64) -> bool {
        (self.final_mass_mg - self.target_mg).abs() <= tolerance
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample (n − 1) standard deviation; 0 for a single sample.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub powder: String,
    pub controller: ControllerKind,
    pub target_mg: f64,
    pub trials: usize,
    pub successes: usize,
    pub dropped: MeanStd,
    pub steps: MeanStd,
    pub time: MeanStd,
    /// Statistics rest on one completed trial.
    pub single_sample: bool,
}

impl ConditionSummary {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }
}

/// Aggregates one condition. Statistics only cover trials that produced a trace.
pub fn compute_metrics(
    powder: &str,
    controller: ControllerKind,
    target_mg: f64,
    outcomes: &[TrialOutcome],
    tolerance: f64,
) -> ConditionSummary {
    let done: Vec<_> = outcomes.iter().filter(|o| o.completed()).collect();
    let pick = |f: fn(&TrialOutcome) -> f64| done.iter().map(|o| f(o)).collect::<Vec<_>>();
    ConditionSummary {
        powder: powder.to_string(),
        controller,
        target_mg,
        trials: outcomes.len(),
        successes: done.iter().filter(|o| o.within(tolerance)).count(),
        dropped: MeanStd::of(&pick(|o| o.final_mass_mg)),
        steps: MeanStd::of(&pick(|o| o.steps as f64)),
        time: MeanStd::of(&pick(|o| o.sim_time_s)),
        single_sample: done.len() == 1,
    }
}

/// Least-squares fit of one coefficient over pooled (action, measured drop) data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledFit {
    pub powder: String,
    pub mode: FlowMode,
    pub n: usize,
    pub coefficient: f64,
    pub r_squared: Option<f64>,
    /// (measured, predicted) per pooled observation.
    pub points: Vec<(f64, f64)>,
}

/// Pools every row that would have passed the storage gate and fits one
/// coefficient per mode. Returns nothing for a mode without data.
pub fn pooled_fit<'a>(
    powder: &str,
    kin: &ValveKinematics,
    rows: impl IntoIterator<Item = &'a StepRow>,
) -> Vec<PooledFit> {
    let mut by_mode: [(FlowMode, Vec<(f64, f64)>); 2] = [
        (FlowMode::Gravity, Vec::new()),
        (FlowMode::Vibration, Vec::new()),
    ];
    for row in rows {
        let Some(dw) = row.measured_delta else {
            continue;
        };
        if dw >= STORE_THRESHOLD_MG {
            let x = crate::flow::regressor(kin, row.l, row.t_pose);
            by_mode[row.vibration as usize].1.push((x, dw));
        }
    }
    by_mode
        .into_iter()
        .filter_map(|(mode, pairs)| {
            let (c, _) = slope_through_origin(&pairs)?;
            Some(PooledFit {
                powder: powder.to_string(),
                mode,
                n: pairs.len(),
                coefficient: c,
                r_squared: r_squared_pairs(&pairs, c),
                points: pairs.iter().map(|&(x, y)| (y, c * x)).collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(final_mass_mg: f64) -> TrialOutcome {
        TrialOutcome {
            target_mg: 500.0,
            final_mass_mg,
            steps: 10,
            sim_time_s: 100.0,
        }
    }

    #[test]
    fn all_within_tolerance() {
        let s = compute_metrics(
            "g",
            ControllerKind::ModelBased,
            500.0,
            &[outcome(499.0), outcome(501.9), outcome(500.0)],
            2.0,
        );
        assert_eq!(s.success_rate(), 1.0);
    }

    #[test]
    fn two_trials_hand_computed() {
        let s = compute_metrics(
            "g",
            ControllerKind::ModelBased,
            500.0,
            &[outcome(499.0), outcome(503.0)],
            2.0,
        );
        assert_eq!(s.successes, 1);
        assert_eq!(s.dropped.mean, 501.0);
        // sqrt(((499-501)^2 + (503-501)^2) / 1) = sqrt(8)
        assert!((s.dropped.std - 2.828_427_124_746_19).abs() < 1e-12);
        assert!(!s.single_sample);
    }

    #[test]
    fn single_record_flags_degenerate_std() {
        let s = compute_metrics(
            "g",
            ControllerKind::DirectPid,
            500.0,
            &[outcome(499.0)],
            2.0,
        );
        assert_eq!(s.dropped.std, 0.0);
        assert!(s.single_sample);
    }

    #[test]
    fn incomplete_trials_count_but_do_not_enter_statistics() {
        let s = compute_metrics(
            "g",
            ControllerKind::ModelBased,
            500.0,
            &[outcome(499.0), outcome(f64::NAN)],
            2.0,
        );
        assert_eq!(s.trials, 2);
        assert_eq!(s.successes, 1);
        assert_eq!(s.dropped.mean, 499.0);
    }
}
