//! Hopper discharge physics and the reduced dispensing model the controller fits.
//!
//! Units throughout: mass in mg, length in mm, time in s. The valve is driven
//! by a dimensionless opening command `L`; the plant maps it to an outlet
//! diameter through [`ValveKinematics::opening_per_command`], while the
//! controller's model works on `L` directly and lets the fitted coefficient
//! absorb the geometry.

use serde::{Deserialize, Serialize};

use crate::error::{finite, non_negative, positive, Error, Result};

/// Gravitational acceleration in mm/s².
pub const GRAVITY_MM_S2: f64 = 9810.0;

/// Exponent of the outlet-size dependence in the discharge law.
pub const FLOW_EXPONENT: f64 = 2.5;

/// Ground-truth physical description of a powder, consumed by the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowderSpec {
    pub name: String,
    /// mg/mm³
    pub bulk_density: f64,
    /// mm
    pub particle_diameter: f64,
    pub flow_coefficient: f64,
    pub particle_correction: f64,
    /// Outlet diameter (mm) below which the powder arches and gravity flow stops.
    pub critical_arch_diameter: f64,
    /// Multiplier on the discharge rate while the vibration motor runs.
    pub vibration_gain: f64,
    /// Relative standard deviation of the mass delivered in one step.
    pub flow_noise_sigma: f64,
    /// mg loaded into the hopper at the start of a trial.
    pub initial_load: f64,
}

impl PowderSpec {
    pub fn validate(&self) -> Result<()> {
        positive("bulk_density", self.bulk_density)?;
        positive("particle_diameter", self.particle_diameter)?;
        non_negative("flow_coefficient", self.flow_coefficient)?;
        non_negative("particle_correction", self.particle_correction)?;
        non_negative("critical_arch_diameter", self.critical_arch_diameter)?;
        non_negative("vibration_gain", self.vibration_gain)?;
        non_negative("flow_noise_sigma", self.flow_noise_sigma)?;
        positive("initial_load", self.initial_load)?;
        Ok(())
    }

    /// Effective diameter lost to the particle-size correction, `k·d`.
    pub fn excluded_diameter(&self) -> f64 {
        self.particle_correction * self.particle_diameter
    }
}

/// Maps opening commands to outlet geometry and timing, and bounds the action space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValveKinematics {
    /// mm of outlet diameter per command unit.
    pub opening_per_command: f64,
    /// Command units per second the valve travels while opening or closing.
    pub travel_rate: f64,
    pub l_min: f64,
    pub l_max: f64,
    pub t_pose_min: f64,
    pub t_pose_max: f64,
}

impl Default for ValveKinematics {
    fn default() -> Self {
        Self {
            opening_per_command: 0.05,
            travel_rate: 100.0,
            l_min: 5.0,
            l_max: 210.0,
            t_pose_min: 0.5,
            t_pose_max: 20.0,
        }
    }
}

impl ValveKinematics {
    pub fn validate(&self) -> Result<()> {
        positive("opening_per_command", self.opening_per_command)?;
        positive("travel_rate", self.travel_rate)?;
        non_negative("l_min", self.l_min)?;
        non_negative("t_pose_min", self.t_pose_min)?;
        finite("l_max", self.l_max)?;
        finite("t_pose_max", self.t_pose_max)?;
        if self.l_max <= self.l_min {
            return Err(Error::InvalidInput {
                name: "l_max",
                value: self.l_max,
                reason: "must exceed l_min",
            });
        }
        if self.t_pose_max <= self.t_pose_min {
            return Err(Error::InvalidInput {
                name: "t_pose_max",
                value: self.t_pose_max,
                reason: "must exceed t_pose_min",
            });
        }
        Ok(())
    }

    /// Outlet diameter (mm) produced by command `l`.
    pub fn outlet_diameter(&self, l: f64) -> f64 {
        self.opening_per_command * l
    }

    /// Checks that `(l, t_pose)` lies inside the controller's action envelope.
    pub fn check_action(&self, l: f64, t_pose: f64) -> Result<()> {
        finite("L", l)?;
        finite("t_pose", t_pose)?;
        if !(self.l_min..=self.l_max).contains(&l) {
            return Err(Error::OutOfBounds {
                name: "L",
                value: l,
                min: self.l_min,
                max: self.l_max,
            });
        }
        if !(self.t_pose_min..=self.t_pose_max).contains(&t_pose) {
            return Err(Error::OutOfBounds {
                name: "t_pose",
                value: t_pose,
                min: self.t_pose_min,
                max: self.t_pose_max,
            });
        }
        Ok(())
    }
}

/// Which discharge regime a coefficient describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowMode {
    Gravity,
    Vibration,
}

impl FlowMode {
    pub fn from_vibration(vibration: bool) -> Self {
        if vibration {
            FlowMode::Vibration
        } else {
            FlowMode::Gravity
        }
    }

    pub fn is_vibration(self) -> bool {
        self == FlowMode::Vibration
    }
}

/// Reduced dispensing model `W = C'·L^2.5·(T(L) + t_pose)` for one flow mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispenseModel {
    pub coefficient: f64,
    pub mode: FlowMode,
}

impl DispenseModel {
    pub fn new(coefficient: f64, mode: FlowMode) -> Result<Self> {
        non_negative("coefficient", coefficient)?;
        Ok(Self { coefficient, mode })
    }
}

/// Discharge rate (mg/s) through an outlet of diameter `outlet_mm`.
///
/// Zero whenever the outlet does not exceed the particle-corrected diameter.
pub fn beverloo_rate(spec: &PowderSpec, outlet_mm: f64, gravity: f64) -> Result<f64> {
    non_negative("outlet diameter", outlet_mm)?;
    positive("gravity", gravity)?;
    let free = outlet_mm - spec.excluded_diameter();
    if free <= 0.0 {
        return Ok(0.0);
    }
    Ok(spec.flow_coefficient * spec.bulk_density * gravity.sqrt() * free.powf(FLOW_EXPONENT))
}

/// Seconds the valve needs to travel from closed to command `l`.
pub fn travel_time(kin: &ValveKinematics, l: f64) -> Result<f64> {
    non_negative("L", l)?;
    if l > kin.l_max {
        return Err(Error::OutOfBounds {
            name: "L",
            value: l,
            min: 0.0,
            max: kin.l_max,
        });
    }
    Ok(l / kin.travel_rate)
}

/// The model regressor `L^2.5·(T(L) + t_pose)`; the prediction is linear in it.
///
/// No bounds checking, callers guarantee `l >= 0`.
pub fn regressor(kin: &ValveKinematics, l: f64, t_pose: f64) -> f64 {
    l.powf(FLOW_EXPONENT) * (l / kin.travel_rate + t_pose)
}

/// Mass (mg) the model expects one action `(l, t_pose)` to deliver.
pub fn predicted_drop(
    model: &DispenseModel,
    kin: &ValveKinematics,
    l: f64,
    t_pose: f64,
) -> Result<f64> {
    kin.check_action(l, t_pose)?;
    Ok(model.coefficient * regressor(kin, l, t_pose))
}

/// Lumped coefficient that makes the reduced model reproduce a particle-free
/// powder on the given valve: `C·ρ_b·√g·κ^2.5`.
pub fn effective_coefficient(spec: &PowderSpec, kin: &ValveKinematics, gravity: f64) -> f64 {
    spec.flow_coefficient
        * spec.bulk_density
        * gravity.sqrt()
        * kin.opening_per_command.powf(FLOW_EXPONENT)
}
