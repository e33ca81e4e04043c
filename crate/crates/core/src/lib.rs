//! Model-based powder dispensing.
//!
//! A hopper-discharge flow law drives a reduced dispensing model whose single
//! lumped coefficient is identified online by least squares. The controller
//! searches a discrete (opening, dwell) grid for the action whose predicted
//! drop best matches a proportional share of the remaining error, and falls
//! back to vibration-assisted flow when gravity cannot deliver enough. A
//! seeded plant simulator and a suite harness compare it against a direct
//! PID baseline.
//!
//! - [`flow`]: discharge law, valve kinematics, reduced model
//! - [`ident`]: observation log and coefficient fitting
//! - [`control`]: model-based controller and PID baseline
//! - [`plant`]: stochastic hopper/valve/balance simulator
//! - [`harness`]: configs, trials, suites, artifacts, reports

pub mod control;
pub mod error;
pub mod flow;
pub mod harness;
pub mod ident;
pub mod plant;

pub use error::{Error, Result};
