//! Simulated hopper, flexible valve, vibration motor and electronic balance.
//!
//! The simulator uses the full discharge law (with the particle correction
//! and an arching threshold) as ground truth, so the controller's reduced
//! model is deliberately mismatched at small openings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::control::ValveAction;
use crate::error::{non_negative, positive, Error, Result};
use crate::flow::{beverloo_rate, travel_time, PowderSpec, ValveKinematics, GRAVITY_MM_S2};

/// Hopper and pan masses are tracked in integer multiples of this many mg
/// so that conservation holds exactly.
pub const MASS_QUANTUM_MG: f64 = 1e-12;

/// Mass in units of [`MASS_QUANTUM_MG`].
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Quanta(pub i64);

impl Quanta {
    pub fn from_mg(mg: f64) -> Self {
        Quanta((mg / MASS_QUANTUM_MG).round() as i64)
    }

    pub fn mg(self) -> f64 {
        self.0 as f64 * MASS_QUANTUM_MG
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalanceModel {
    /// Reading quantization step, mg.
    pub resolution: f64,
    pub noise_sigma: f64,
    pub settle_time_mean: f64,
    pub settle_time_sigma: f64,
}

impl Default for BalanceModel {
    fn default() -> Self {
        Self {
            resolution: 0.1,
            noise_sigma: 0.1,
            settle_time_mean: 8.0,
            settle_time_sigma: 1.0,
        }
    }
}

impl BalanceModel {
    pub fn validate(&self) -> Result<()> {
        positive("resolution", self.resolution)?;
        non_negative("noise_sigma", self.noise_sigma)?;
        positive("settle_time_mean", self.settle_time_mean)?;
        non_negative("settle_time_sigma", self.settle_time_sigma)?;
        Ok(())
    }
}

/// Rounds to the nearest multiple of `resolution`, halves away from zero.
pub fn quantize(value: f64, resolution: f64) -> f64 {
    let n = value / resolution;
    // x/res lands a few ulps off .5 for decimal resolutions
    let frac = n.fract().abs();
    let steps = if (frac - 0.5).abs() < 1e-9 {
        n.trunc() + n.signum()
    } else {
        n.round()
    };
    steps * resolution
}

/// Built-in powder profiles.
pub mod archetypes {
    use super::PowderSpec;

    pub const GLASS_BEADS: &str = "glass-beads";
    pub const MSG: &str = "msg";
    pub const TIO2: &str = "tio2";

    pub const ALL: [&str; 3] = [GLASS_BEADS, MSG, TIO2];

    /// Free-flowing, no arching.
    pub fn glass_beads() -> PowderSpec {
        PowderSpec {
            name: GLASS_BEADS.into(),
            bulk_density: 1.5,
            particle_diameter: 0.1,
            flow_coefficient: 0.0035,
            particle_correction: 1.4,
            critical_arch_diameter: 0.0,
            vibration_gain: 1.5,
            flow_noise_sigma: 0.05,
            initial_load: 5000.0,
        }
    }

    /// Free-flowing at large openings, arches below a third of the opening range.
    pub fn msg() -> PowderSpec {
        PowderSpec {
            name: MSG.into(),
            bulk_density: 0.8,
            particle_diameter: 0.3,
            flow_coefficient: 0.0063,
            particle_correction: 1.4,
            critical_arch_diameter: 3.5,
            vibration_gain: 1.5,
            flow_noise_sigma: 0.10,
            initial_load: 5000.0,
        }
    }

    /// Cohesive: arches at every achievable opening, flows only with vibration.
    pub fn tio2() -> PowderSpec {
        PowderSpec {
            name: TIO2.into(),
            bulk_density: 0.5,
            particle_diameter: 0.001,
            flow_coefficient: 0.0035,
            particle_correction: 1.4,
            critical_arch_diameter: 12.0,
            vibration_gain: 1.1,
            flow_noise_sigma: 0.15,
            initial_load: 4000.0,
        }
    }

    pub fn by_name(name: &str) -> Option<PowderSpec> {
        match name {
            GLASS_BEADS => Some(glass_beads()),
            MSG => Some(msg()),
            TIO2 => Some(tio2()),
            _ => None,
        }
    }
}

/// Result of executing one valve action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Execution {
    /// Mass that actually reached the pan, mg.
    pub delivered: f64,
    /// Opening travel + dwell + closing travel, s.
    pub elapsed: f64,
    /// The hopper ran dry during this action.
    pub depleted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceReading {
    pub mass: f64,
    pub settle: f64,
}

/// Anything that can dispense and weigh.
pub trait Plant {
    fn execute(&mut self, action: &ValveAction) -> Result<Execution>;

    /// Waits for the balance to settle and reads it.
    fn read_balance(&mut self) -> BalanceReading;

    /// Initial reading of an already-settled balance; does not advance the clock.
    fn tare_reading(&mut self) -> f64;

    /// Elapsed simulated time, s.
    fn clock(&self) -> f64;

    fn is_depleted(&self) -> bool;
}

/// Mixes a suite seed and a trial index into an independent trial seed (splitmix64).
pub fn trial_seed(suite_seed: u64, trial_index: u64) -> u64 {
    let mut z = suite_seed ^ trial_index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const FLOW_STREAM: u64 = 1;
const BALANCE_STREAM: u64 = 2;
const SETTLE_STREAM: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone)]
pub struct SimPlant {
    spec: PowderSpec,
    kin: ValveKinematics,
    balance: BalanceModel,
    gravity: f64,
    initial: Quanta,
    remaining: Quanta,
    dispensed: Quanta,
    clock: f64,
    depleted: bool,
    flow_rng: ChaCha8Rng,
    balance_rng: ChaCha8Rng,
    settle_rng: ChaCha8Rng,
}

impl SimPlant {
    pub fn new(
        spec: PowderSpec,
        kin: ValveKinematics,
        balance: BalanceModel,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        kin.validate()?;
        balance.validate()?;
        let initial = Quanta::from_mg(spec.initial_load);
        Ok(Self {
            spec,
            kin,
            balance,
            gravity: GRAVITY_MM_S2,
            initial,
            remaining: initial,
            dispensed: Quanta(0),
            clock: 0.0,
            depleted: false,
            flow_rng: stream(seed, FLOW_STREAM),
            balance_rng: stream(seed, BALANCE_STREAM),
            settle_rng: stream(seed, SETTLE_STREAM),
        })
    }

    pub fn spec(&self) -> &PowderSpec {
        &self.spec
    }

    pub fn initial(&self) -> Quanta {
        self.initial
    }

    pub fn remaining(&self) -> Quanta {
        self.remaining
    }

    pub fn dispensed(&self) -> Quanta {
        self.dispensed
    }

    /// Noise-free discharge rate (mg/s) for an action's opening and vibration state.
    pub fn flow_rate(&self, l: f64, vibration: bool) -> Result<f64> {
        let outlet = self.kin.outlet_diameter(l);
        let base = beverloo_rate(&self.spec, outlet, self.gravity)?;
        Ok(if vibration {
            // vibration breaks arches
            self.spec.vibration_gain * base
        } else if outlet > self.spec.critical_arch_diameter {
            base
        } else {
            0.0
        })
    }
}

impl Plant for SimPlant {
    fn execute(&mut self, action: &ValveAction) -> Result<Execution> {
        let travel = travel_time(&self.kin, action.l)?;
        non_negative("t_pose", action.t_pose)?;
        if action.t_pose > self.kin.t_pose_max {
            return Err(Error::OutOfBounds {
                name: "t_pose",
                value: action.t_pose,
                min: 0.0,
                max: self.kin.t_pose_max,
            });
        }
        let rate = self.flow_rate(action.l, action.vibration)?;
        // drawn every step so the stream position does not depend on the action
        let z: f64 = self.flow_rng.sample(StandardNormal);
        let eps = (self.spec.flow_noise_sigma * z).max(-1.0);
        let demanded = Quanta::from_mg((rate * (travel + action.t_pose) * (1.0 + eps)).max(0.0));

        let depleted = demanded >= self.remaining && demanded.0 > 0;
        let delivered = demanded.min(self.remaining);
        self.remaining = Quanta(self.remaining.0 - delivered.0);
        self.dispensed = Quanta(self.dispensed.0 + delivered.0);
        self.depleted |= depleted;

        let elapsed = 2.0 * travel + action.t_pose;
        self.clock += elapsed;
        Ok(Execution {
            delivered: delivered.mg(),
            elapsed,
            depleted,
        })
    }

    fn read_balance(&mut self) -> BalanceReading {
        let mass = self.tare_reading();
        let z: f64 = self.settle_rng.sample(StandardNormal);
        let settle = (self.balance.settle_time_mean + self.balance.settle_time_sigma * z).max(0.0);
        self.clock += settle;
        BalanceReading { mass, settle }
    }

    fn tare_reading(&mut self) -> f64 {
        let z: f64 = self.balance_rng.sample(StandardNormal);
        quantize(
            self.dispensed.mg() + self.balance.noise_sigma * z,
            self.balance.resolution,
        )
    }

    fn clock(&self) -> f64 {
        self.clock
    }

    fn is_depleted(&self) -> bool {
        self.depleted || self.remaining.0 == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{effective_coefficient, regressor};
    use proptest::prelude::*;

    fn quiet(spec: PowderSpec) -> PowderSpec {
        PowderSpec {
            flow_noise_sigma: 0.0,
            ..spec
        }
    }

    fn silent_balance() -> BalanceModel {
        BalanceModel {
            resolution: 1e-12,
            noise_sigma: 0.0,
            ..BalanceModel::default()
        }
    }

    fn act(l: f64, t_pose: f64, vibration: bool) -> ValveAction {
        ValveAction {
            l,
            t_pose,
            vibration,
        }
    }

    #[test]
    fn quantize_examples() {
        assert!((quantize(1.234, 0.1) - 1.2).abs() < 1e-12);
        assert!((quantize(1.25, 0.1) - 1.3).abs() < 1e-12);
        assert!((quantize(-1.25, 0.1) + 1.3).abs() < 1e-12);
        assert!((quantize(0.04, 0.1)).abs() < 1e-12);
    }

    #[test]
    fn closed_valve_delivers_nothing() {
        let mut p = SimPlant::new(
            archetypes::glass_beads(),
            ValveKinematics::default(),
            BalanceModel::default(),
            1,
        )
        .unwrap();
        let e = p.execute(&act(0.0, 5.0, false)).unwrap();
        assert_eq!(e.delivered, 0.0);
        assert_eq!(p.remaining(), p.initial());
        assert!(!p.is_depleted());
    }

    #[test]
    fn cohesive_powder_needs_vibration() {
        let kin = ValveKinematics::default();
        let spec = archetypes::tio2();
        assert!(spec.critical_arch_diameter > kin.outlet_diameter(kin.l_max));
        let mut p = SimPlant::new(spec, kin, BalanceModel::default(), 3).unwrap();
        for l in [5.0, 50.0, 120.0, 210.0] {
            for t in [0.5, 20.0] {
                assert_eq!(p.execute(&act(l, t, false)).unwrap().delivered, 0.0);
            }
        }
        assert!(p.execute(&act(100.0, 2.0, true)).unwrap().delivered > 0.0);
    }

    #[test]
    fn noise_free_drop_matches_closed_form() {
        let kin = ValveKinematics::default();
        let spec = quiet(archetypes::glass_beads());
        let mut p = SimPlant::new(spec.clone(), kin, silent_balance(), 9).unwrap();
        let (l, t) = (120.0, 3.5);
        let e = p.execute(&act(l, t, false)).unwrap();
        // independent evaluation of the discharge law times duration
        let free: f64 = 0.05 * l - 1.4 * 0.1;
        let q = 0.0035 * 1.5 * 9810f64.sqrt() * free.powf(2.5);
        let expected = q * (l / 100.0 + t);
        assert!((e.delivered - expected).abs() / expected < 1e-12);
        assert!((e.elapsed - (2.0 * 1.2 + 3.5)).abs() < 1e-12);
    }

    #[test]
    fn particle_free_plant_matches_reduced_model() {
        let kin = ValveKinematics::default();
        let spec = PowderSpec {
            particle_correction: 0.0,
            ..quiet(archetypes::glass_beads())
        };
        let c_eff = effective_coefficient(&spec, &kin, GRAVITY_MM_S2);
        let mut p = SimPlant::new(spec, kin, silent_balance(), 0).unwrap();
        for (l, t) in [(10.0, 0.5), (55.0, 7.0), (210.0, 20.0)] {
            let e = p.execute(&act(l, t, false)).unwrap();
            let predicted = c_eff * regressor(&kin, l, t);
            assert!((e.delivered - predicted).abs() / predicted < 1e-9);
        }
    }

    #[test]
    fn depletion_clamps_to_available_mass() {
        let kin = ValveKinematics::default();
        let spec = PowderSpec {
            initial_load: 1.0,
            ..quiet(archetypes::glass_beads())
        };
        let mut p = SimPlant::new(spec, kin, silent_balance(), 0).unwrap();
        let e = p.execute(&act(60.0, 1.0, false)).unwrap();
        assert_eq!(e.delivered, 1.0);
        assert!(e.depleted);
        assert_eq!(p.remaining(), Quanta(0));
        assert!(p.is_depleted());
    }

    #[test]
    fn balance_reading_quantized() {
        let kin = ValveKinematics::default();
        let bal = BalanceModel {
            noise_sigma: 0.0,
            ..BalanceModel::default()
        };
        let mut p = SimPlant::new(quiet(archetypes::glass_beads()), kin, bal, 0).unwrap();
        p.dispensed = Quanta::from_mg(1.234);
        assert!((p.read_balance().mass - 1.2).abs() < 1e-12);
        p.dispensed = Quanta::from_mg(1.25);
        assert!((p.read_balance().mass - 1.3).abs() < 1e-12);
    }

    #[test]
    fn clock_advances_by_step_and_settle() {
        let kin = ValveKinematics::default();
        let mut p =
            SimPlant::new(archetypes::glass_beads(), kin, BalanceModel::default(), 5).unwrap();
        let t0 = p.tare_reading();
        assert!(t0.abs() < 1.0);
        assert_eq!(p.clock(), 0.0);
        let e = p.execute(&act(80.0, 2.0, false)).unwrap();
        let r = p.read_balance();
        assert_eq!(p.clock(), e.elapsed + r.settle);
    }

    #[test]
    fn seeded_sequences_repeat() {
        let run = |seed| {
            let mut p = SimPlant::new(
                archetypes::glass_beads(),
                ValveKinematics::default(),
                BalanceModel::default(),
                seed,
            )
            .unwrap();
            (0..20)
                .map(|i| {
                    p.execute(&act(20.0 + 5.0 * i as f64, 1.0, false)).unwrap();
                    p.read_balance().mass.to_bits()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
    }

    #[test]
    fn balance_noise_does_not_shift_flow_noise() {
        let kin = ValveKinematics::default();
        let noisy = BalanceModel::default();
        let silent = BalanceModel {
            noise_sigma: 0.0,
            ..noisy
        };
        let spec = archetypes::glass_beads();
        let mut a = SimPlant::new(spec.clone(), kin, noisy, 11).unwrap();
        let mut b = SimPlant::new(spec, kin, silent, 11).unwrap();
        for i in 0..10 {
            let action = act(50.0 + i as f64, 1.0, false);
            let da = a.execute(&action).unwrap().delivered;
            a.read_balance();
            let db = b.execute(&action).unwrap().delivered;
            b.read_balance();
            assert_eq!(da, db);
        }
    }

    #[test]
    fn rejects_actions_outside_valve_range() {
        let mut p = SimPlant::new(
            archetypes::glass_beads(),
            ValveKinematics::default(),
            BalanceModel::default(),
            0,
        )
        .unwrap();
        assert!(p.execute(&act(-1.0, 1.0, false)).is_err());
        assert!(p.execute(&act(300.0, 1.0, false)).is_err());
        assert!(p.execute(&act(10.0, 30.0, false)).is_err());
    }

    proptest! {
        #[test]
        fn drop_monotone_in_opening_and_dwell(
            seed in any::<u64>(),
            l in 0.0f64..200.0,
            dl in 0.0f64..10.0,
            t in 0.0f64..19.0,
            dt in 0.0f64..1.0,
            vibration in any::<bool>(),
            which in 0usize..3,
        ) {
            let kin = ValveKinematics::default();
            let spec = archetypes::by_name(archetypes::ALL[which]).unwrap();
            let fresh = || SimPlant::new(spec.clone(), kin, BalanceModel::default(), seed).unwrap();
            let base = fresh().execute(&act(l, t, vibration)).unwrap().delivered;
            let wider = fresh().execute(&act(l + dl, t, vibration)).unwrap().delivered;
            let longer = fresh().execute(&act(l, t + dt, vibration)).unwrap().delivered;
            prop_assert!(wider >= base);
            prop_assert!(longer >= base);
        }
    }
}
