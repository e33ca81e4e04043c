use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::control::{
    ActionGrid, ModelControllerConfig, PidConfig, PidGains, StallRule, DEFAULT_MAX_STEPS,
    DEFAULT_TOLERANCE_MG,
};
use crate::error::{Error, Result};
use crate::flow::{PowderSpec, ValveKinematics};
use crate::plant::{archetypes, BalanceModel};

/// Frozen direct-PID profile, tuned once on the 500 mg glass-bead condition.
pub const PID_PROFILE_JSON: &str = include_str!("../../profiles/pid_glass_500mg.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControllerKind {
    #[serde(rename = "model-based", alias = "model")]
    ModelBased,
    #[serde(rename = "direct-pid", alias = "pid")]
    DirectPid,
}

impl ControllerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ControllerKind::ModelBased => "model-based",
            ControllerKind::DirectPid => "direct-pid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "model" | "model-based" => Some(ControllerKind::ModelBased),
            "pid" | "direct-pid" => Some(ControllerKind::DirectPid),
            _ => None,
        }
    }
}

/// A JSON value that may be a single item or a list of items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(x) => vec![x.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KinematicsOverrides {
    pub opening_per_command: Option<f64>,
    pub travel_rate: Option<f64>,
    pub l_min: Option<f64>,
    pub l_max: Option<f64>,
    pub t_pose_min: Option<f64>,
    pub t_pose_max: Option<f64>,
}

impl KinematicsOverrides {
    pub fn apply(&self, mut kin: ValveKinematics) -> ValveKinematics {
        let o = self;
        kin.opening_per_command = o.opening_per_command.unwrap_or(kin.opening_per_command);
        kin.travel_rate = o.travel_rate.unwrap_or(kin.travel_rate);
        kin.l_min = o.l_min.unwrap_or(kin.l_min);
        kin.l_max = o.l_max.unwrap_or(kin.l_max);
        kin.t_pose_min = o.t_pose_min.unwrap_or(kin.t_pose_min);
        kin.t_pose_max = o.t_pose_max.unwrap_or(kin.t_pose_max);
        kin
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalanceOverrides {
    pub resolution: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub settle_time_mean: Option<f64>,
    pub settle_time_sigma: Option<f64>,
}

/// Overrides applied on top of every selected powder archetype.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantOverrides {
    pub bulk_density: Option<f64>,
    pub particle_diameter: Option<f64>,
    pub flow_coefficient: Option<f64>,
    pub particle_correction: Option<f64>,
    pub critical_arch_diameter: Option<f64>,
    pub vibration_gain: Option<f64>,
    pub flow_noise_sigma: Option<f64>,
    pub initial_load: Option<f64>,
    pub balance: Option<BalanceOverrides>,
}

impl PlantOverrides {
    pub fn apply_powder(&self, mut s: PowderSpec) -> PowderSpec {
        let o = self;
        s.bulk_density = o.bulk_density.unwrap_or(s.bulk_density);
        s.particle_diameter = o.particle_diameter.unwrap_or(s.particle_diameter);
        s.flow_coefficient = o.flow_coefficient.unwrap_or(s.flow_coefficient);
        s.particle_correction = o.particle_correction.unwrap_or(s.particle_correction);
        s.critical_arch_diameter = o.critical_arch_diameter.unwrap_or(s.critical_arch_diameter);
        s.vibration_gain = o.vibration_gain.unwrap_or(s.vibration_gain);
        s.flow_noise_sigma = o.flow_noise_sigma.unwrap_or(s.flow_noise_sigma);
        s.initial_load = o.initial_load.unwrap_or(s.initial_load);
        s
    }

    pub fn apply_balance(&self, mut b: BalanceModel) -> BalanceModel {
        if let Some(o) = self.balance {
            b.resolution = o.resolution.unwrap_or(b.resolution);
            b.noise_sigma = o.noise_sigma.unwrap_or(b.noise_sigma);
            b.settle_time_mean = o.settle_time_mean.unwrap_or(b.settle_time_mean);
            b.settle_time_sigma = o.settle_time_sigma.unwrap_or(b.settle_time_sigma);
        }
        b
    }
}

/// Direct-PID baseline parameters as stored in a profile file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidProfile {
    pub k_p: f64,
    pub k_i: f64,
    pub k_d: f64,
    pub integral_limit: f64,
    pub t_pose_fixed: f64,
    pub l_per_mg: f64,
    /// Forces the vibration motor on or off; by default it runs only for
    /// powders that cannot flow by gravity at the largest opening.
    #[serde(default)]
    pub vibration: Option<bool>,
}

impl PidProfile {
    pub fn frozen() -> Self {
        serde_json::from_str(PID_PROFILE_JSON).expect("checked-in PID profile parses")
    }
}

impl Default for PidProfile {
    fn default() -> Self {
        Self::frozen()
    }
}

fn default_powder() -> OneOrMany<String> {
    OneOrMany::One(archetypes::GLASS_BEADS.to_string())
}

fn default_controller() -> OneOrMany<ControllerKind> {
    OneOrMany::One(ControllerKind::ModelBased)
}

fn default_targets() -> Vec<f64> {
    vec![20.0, 50.0, 500.0, 3000.0]
}

fn default_trials() -> u32 {
    10
}

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE_MG
}

fn default_max_steps() -> u32 {
    DEFAULT_MAX_STEPS
}

fn default_k_p() -> f64 {
    0.5
}

/// Experiment description, read from a JSON document. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_powder")]
    pub powder: OneOrMany<String>,
    #[serde(default = "default_controller")]
    pub controller: OneOrMany<ControllerKind>,
    #[serde(default = "default_targets")]
    pub targets_mg: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: u32,
    #[serde(default = "default_tolerance")]
    pub tolerance_mg: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: u32,
    #[serde(default = "default_k_p")]
    pub k_p: f64,
    #[serde(default)]
    pub grid: ActionGrid,
    #[serde(default)]
    pub stall: StallRule,
    #[serde(default)]
    pub pid: PidProfile,
    #[serde(default)]
    pub kinematics: KinematicsOverrides,
    #[serde(default)]
    pub plant: PlantOverrides,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config uses defaults")
    }
}

/// Everything needed to run the trials of one (powder, controller, target) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub powder: PowderSpec,
    pub controller: ControllerKind,
    pub target_mg: f64,
    pub kinematics: ValveKinematics,
    pub balance: BalanceModel,
    pub model: ModelControllerConfig,
    pub pid: PidConfig,
}

fn check(errors: &mut Vec<String>, field: &str, ok: bool, msg: &str) {
    if !ok {
        errors.push(format!("{field}: {msg}"));
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))
    }

    pub fn powders(&self) -> Vec<String> {
        self.powder.to_vec()
    }

    pub fn controllers(&self) -> Vec<ControllerKind> {
        self.controller.to_vec()
    }

    pub fn kinematics(&self) -> ValveKinematics {
        self.kinematics.apply(ValveKinematics::default())
    }

    pub fn balance(&self) -> BalanceModel {
        self.plant.apply_balance(BalanceModel::default())
    }

    pub fn powder_spec(&self, name: &str) -> Result<PowderSpec> {
        archetypes::by_name(name)
            .map(|s| self.plant.apply_powder(s))
            .ok_or_else(|| Error::UnknownPowder(name.to_string()))
    }

    /// Collects every field-level problem instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let e = &mut errors;
        let powders = self.powders();
        check(
            e,
            "powder",
            !powders.is_empty(),
            "at least one powder required",
        );
        for p in &powders {
            match self.powder_spec(p) {
                Ok(spec) => {
                    if let Err(err) = spec.validate() {
                        e.push(format!("plant ({p}): {err}"));
                    }
                }
                Err(_) => e.push(format!(
                    "powder: unknown archetype `{p}` (expected one of {})",
                    archetypes::ALL.join(", ")
                )),
            }
        }
        check(
            e,
            "controller",
            !self.controllers().is_empty(),
            "at least one controller required",
        );
        check(
            e,
            "targets_mg",
            !self.targets_mg.is_empty(),
            "at least one target required",
        );
        for t in &self.targets_mg {
            check(
                e,
                "targets_mg",
                t.is_finite() && *t > 0.0,
                &format!("target {t} must be > 0"),
            );
        }
        check(e, "trials", self.trials >= 1, "must be >= 1");
        check(
            e,
            "tolerance_mg",
            self.tolerance_mg.is_finite() && self.tolerance_mg > 0.0,
            "must be > 0",
        );
        check(e, "max_steps", self.max_steps >= 1, "must be >= 1");
        check(
            e,
            "k_p",
            self.k_p.is_finite() && self.k_p > 0.0 && self.k_p <= 1.0,
            "must lie in (0, 1]",
        );
        check(
            e,
            "grid.dl",
            self.grid.dl.is_finite() && self.grid.dl > 0.0,
            "must be > 0",
        );
        check(
            e,
            "grid.dt",
            self.grid.dt.is_finite() && self.grid.dt > 0.0,
            "must be > 0",
        );
        check(
            e,
            "stall.max_ratio",
            self.stall.max_ratio.is_finite() && (0.0..=1.0).contains(&self.stall.max_ratio),
            "must lie in [0, 1]",
        );
        check(
            e,
            "stall.min_predicted_mg",
            self.stall.min_predicted_mg.is_finite() && self.stall.min_predicted_mg >= 0.0,
            "must be >= 0",
        );
        if let Err(err) = self.kinematics().validate() {
            e.push(format!("kinematics: {err}"));
        }
        if let Err(err) = self.balance().validate() {
            e.push(format!("plant.balance: {err}"));
        }
        let p = &self.pid;
        for (name, v) in [("pid.k_p", p.k_p), ("pid.k_i", p.k_i), ("pid.k_d", p.k_d)] {
            check(e, name, v.is_finite(), "must be finite");
        }
        check(
            e,
            "pid.integral_limit",
            p.integral_limit.is_finite() && p.integral_limit >= 0.0,
            "must be >= 0",
        );
        check(
            e,
            "pid.t_pose_fixed",
            p.t_pose_fixed.is_finite() && p.t_pose_fixed >= 0.0,
            "must be >= 0",
        );
        check(
            e,
            "pid.l_per_mg",
            p.l_per_mg.is_finite() && p.l_per_mg > 0.0,
            "must be > 0",
        );
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Expands the (powder × controller × target) matrix.
    pub fn conditions(&self) -> Result<Vec<Condition>> {
        self.validate()?;
        let kinematics = self.kinematics();
        let balance = self.balance();
        let model = ModelControllerConfig {
            k_p: self.k_p,
            grid: self.grid,
            tolerance: self.tolerance_mg,
            max_steps: self.max_steps,
            stall: self.stall,
            ..ModelControllerConfig::default()
        };
        let mut out = Vec::new();
        for name in self.powders() {
            let powder = self.powder_spec(&name)?;
            let cohesive =
                powder.critical_arch_diameter >= kinematics.outlet_diameter(kinematics.l_max);
            let pid = PidConfig {
                gains: PidGains {
                    k_p: self.pid.k_p,
                    k_i: self.pid.k_i,
                    k_d: self.pid.k_d,
                },
                integral_limit: self.pid.integral_limit,
                t_pose_fixed: self.pid.t_pose_fixed,
                l_per_mg: self.pid.l_per_mg,
                vibration: self.pid.vibration.unwrap_or(cohesive),
                tolerance: self.tolerance_mg,
                max_steps: self.max_steps,
            };
            for controller in self.controllers() {
                for &target_mg in &self.targets_mg {
                    out.push(Condition {
                        powder: powder.clone(),
                        controller,
                        target_mg,
                        kinematics,
                        balance,
                        model,
                        pid,
                    });
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_yields_protocol_defaults() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c.targets_mg, vec![20.0, 50.0, 500.0, 3000.0]);
        assert_eq!(c.trials, 10);
        assert_eq!(c.tolerance_mg, 2.0);
        assert_eq!(c.max_steps, 100);
        assert!(c.validate().is_ok());
        assert_eq!(c.conditions().unwrap().len(), 4);
    }

    #[test]
    fn unknown_keys_fail_fast() {
        let err = ExperimentConfig::from_json(r#"{"trails": 3}"#).unwrap_err();
        assert!(err.to_string().contains("trails"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"plant": {"densty": 1.0}}"#).unwrap_err();
        assert!(err.to_string().contains("densty"), "{err}");
    }

    #[test]
    fn zero_trials_rejected_with_field_name() {
        let c = ExperimentConfig::from_json(r#"{"trials": 0, "k_p": 1.5, "targets_mg": [-1]}"#)
            .unwrap();
        let Err(Error::Config(errors)) = c.validate() else {
            panic!()
        };
        assert!(errors.iter().any(|m| m.starts_with("trials:")));
        assert!(errors.iter().any(|m| m.starts_with("k_p:")));
        assert!(errors.iter().any(|m| m.starts_with("targets_mg:")));
    }

    #[test]
    fn lists_and_aliases() {
        let c = ExperimentConfig::from_json(
            r#"{"powder": ["glass-beads", "tio2"], "controller": ["model", "direct-pid"], "targets_mg": [20, 500]}"#,
        )
        .unwrap();
        let conds = c.conditions().unwrap();
        assert_eq!(conds.len(), 8);
        let tio2_pid = conds
            .iter()
            .find(|c| c.powder.name == "tio2" && c.controller == ControllerKind::DirectPid)
            .unwrap();
        assert!(tio2_pid.pid.vibration);
    }

    #[test]
    fn unknown_powder_reported() {
        let c = ExperimentConfig::from_json(r#"{"powder": "flour"}"#).unwrap();
        let Err(Error::Config(errors)) = c.validate() else {
            panic!()
        };
        assert!(errors[0].contains("flour"));
    }

    #[test]
    fn overrides_apply() {
        let c = ExperimentConfig::from_json(
            r#"{"plant": {"flow_noise_sigma": 0, "balance": {"noise_sigma": 0}}, "kinematics": {"l_max": 150}}"#,
        )
        .unwrap();
        assert_eq!(c.powder_spec("glass-beads").unwrap().flow_noise_sigma, 0.0);
        assert_eq!(c.balance().noise_sigma, 0.0);
        assert_eq!(c.balance().resolution, 0.1);
        assert_eq!(c.kinematics().l_max, 150.0);
    }

    #[test]
    fn checked_in_profile_matches_controller_default() {
        let p = PidProfile::frozen();
        let d = PidConfig::default();
        assert_eq!(p.k_p, d.gains.k_p);
        assert_eq!(p.k_i, d.gains.k_i);
        assert_eq!(p.k_d, d.gains.k_d);
        assert_eq!(p.integral_limit, d.integral_limit);
        assert_eq!(p.t_pose_fixed, d.t_pose_fixed);
        assert_eq!(p.l_per_mg, d.l_per_mg);
    }
}
