//! Worst-case treatment assignment audits for covariate-balanced
//! randomized trials.
//!
//! The crate finds balanced-but-adversarial assignments by sweeping a
//! Lagrangian trade-off between the measured treatment effect and a
//! balancing score, solved exactly as mixed-integer linear programs.

pub mod atastreet;
pub mod balance;
pub mod counterfactual;
pub mod datagen;
pub mod error;
pub mod io;
pub mod milp;
pub mod numeric;
pub mod pocock;
pub mod seeding;
pub mod trial;

pub use error::{Error, Result};
pub use numeric::Scalar;

/// Double-precision instantiations of the solver types.
pub type MilpModel = milp::MilpModel<f64>;
pub type MilpSolution = milp::MilpSolution<f64>;
pub type SolverConfig = milp::SolverConfig<f64>;
