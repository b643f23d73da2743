//! Decentralized PID, linear MPC and nonlinear MPC behind one interface.

pub mod lmpc;
pub mod nmpc;
pub mod pid;

use nalgebra::{Matrix2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulator::SetpointSchedule;

pub use lmpc::Lmpc;
pub use nmpc::Nmpc;
pub use pid::{pid_step, simc_tune, DecentralizedPid, PidGains, PidState};

/// A sampled-data controller: one call per sample, measurement in, input out.
pub trait Controller {
    fn name(&self) -> &'static str;

    /// Forgets all internal state (filters, integrators, warm starts).
    fn reset(&mut self);

    /// Input for the sample at `t` given the measurement `y` taken at `t`.
    fn step(&mut self, y: &Vector4<f64>, preview: &SetpointPreview, t: f64) -> Vector2<f64>;

    /// Solver statistics of the last step, for optimization-based controllers.
    fn last_stats(&self) -> Option<SolverStats> {
        None
    }
}

/// Setpoints over the prediction horizon. In anticipatory mode `at(j)` looks
/// `j` samples ahead in the schedule; otherwise it repeats the current setpoint.
#[derive(Clone, Copy, Debug)]
pub struct SetpointPreview<'a> {
    schedule: &'a SetpointSchedule,
    t: f64,
    ts: f64,
    anticipatory: bool,
}

impl<'a> SetpointPreview<'a> {
    pub fn new(schedule: &'a SetpointSchedule, t: f64, ts: f64, anticipatory: bool) -> Self {
        Self {
            schedule,
            t,
            ts,
            anticipatory,
        }
    }

    pub fn current(&self) -> Vector2<f64> {
        self.schedule.at(self.t)
    }

    pub fn at(&self, j: usize) -> Vector2<f64> {
        if self.anticipatory {
            // Nudge forward so breakpoints on the sample grid survive round-off.
            self.schedule.at(self.t + j as f64 * self.ts + 1e-9 * self.ts)
        } else {
            self.current()
        }
    }

    pub fn anticipatory(&self) -> bool {
        self.anticipatory
    }
}

/// Per-step optimizer report, appended to the trajectory log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    /// QP working-set changes (LMPC) or SQP iterations (NMPC).
    pub iterations: usize,
    pub qp_iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub kkt_residual: f64,
    /// The previous input was held because the solver failed.
    pub fallback: bool,
}

/// Shared MPC tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcConfig {
    /// Tracking weight on `z − z̄`.
    pub q: Matrix2<f64>,
    /// Weight on the input rate `u_j − u_{j−1}`.
    pub s: Matrix2<f64>,
    pub horizon: usize,
    pub ts: f64,
    pub u_min: Vector2<f64>,
    pub u_max: Vector2<f64>,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            q: Matrix2::from_diagonal(&Vector2::new(10.0, 10.0)),
            s: Matrix2::identity(),
            horizon: 160,
            ts: 5.0,
            u_min: Vector2::repeat(160.0),
            u_max: Vector2::repeat(350.0),
        }
    }
}

fn is_psd(m: &Matrix2<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-12 * (1.0 + m.amax())
        && m.symmetric_eigenvalues().iter().all(|l| *l >= -1e-12 * (1.0 + m.amax()))
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if !is_psd(&self.q) || !is_psd(&self.s) {
            return Err(Error::InvalidParameter("MPC weights must be symmetric positive semidefinite".into()));
        }
        if self.s.symmetric_eigenvalues().min() <= 0.0 {
            return Err(Error::InvalidParameter(
                "the input-rate weight must be positive definite for a strictly convex QP".into(),
            ));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be at least one step".into()));
        }
        if !(self.ts.is_finite() && self.ts > 0.0) {
            return Err(Error::InvalidParameter(format!("sample time must be positive, got {}", self.ts)));
        }
        if (0..2).any(|i| !(self.u_min[i] < self.u_max[i])) {
            return Err(Error::InvalidParameter("input bounds must satisfy u_min < u_max".into()));
        }
        Ok(())
    }

    pub fn clip(&self, u: &Vector2<f64>) -> Vector2<f64> {
        u.zip_zip_map(&self.u_min, &self.u_max, |v, lo, hi| v.clamp(lo, hi))
    }

    /// Horizon references `z̄_{k+1} … z̄_{k+N}`.
    pub fn references(&self, preview: &SetpointPreview) -> Vec<Vector2<f64>> {
        (1..=self.horizon).map(|j| preview.at(j)).collect()
    }
}
