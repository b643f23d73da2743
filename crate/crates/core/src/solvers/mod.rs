//! Optimization kernels behind the MPCs.

pub mod qp;
pub mod sqp;

pub use qp::{solve_box_qp, Bound, BoxQp, QpOptions, QpSolution};
pub use sqp::{
    condense, solve_sqp, AffineShooting, Condensed, Linearization, NlpProblem, Rk4Shooting, ShootingIterate,
    ShootingModel, SqpOptions, SqpResult, TrackingCost,
};
