//! Quadruple-tank process workbench: the nonlinear stochastic plant,
//! continuous-discrete Kalman filters, maximum-likelihood identification,
//! and decentralized PID, linear MPC and nonlinear MPC controllers with a
//! closed-loop experiment harness.

pub mod controllers;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod params;
pub mod rng;
pub mod simulator;
pub mod solvers;
pub mod sysid;

pub use error::{Error, Result};
pub use model::{LinearModel, OperatingPoint, QuadTank};
pub use params::{ModelParams, NoiseParams};
