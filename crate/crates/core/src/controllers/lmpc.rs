//! Offset-free linear MPC: CD-KF on the disturbance-augmented linearization
//! and a condensed box QP over the stacked input deviations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Vector2, Vector4};

use super::{Controller, MpcConfig, SetpointPreview, SolverStats};
use crate::error::{Error, Result};
use crate::estimators::{filter_update, kf_predict, GaussianBelief, InitialBeliefConfig, LinearFilterModel};
use crate::model::{discretize_zoh, LinearModel, ZohModel};
use crate::params::NoiseParams;
use crate::solvers::qp::{solve_box_qp, Bound, BoxQp, QpOptions};
use crate::solvers::sqp::{condense, Linearization, ShootingIterate, TrackingCost};

#[derive(Clone, Debug)]
pub struct Lmpc {
    pub cfg: MpcConfig,
    lm: LinearModel,
    zoh: ZohModel,
    filter: LinearFilterModel,
    prior: InitialBeliefConfig,
    hessian: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
    belief: Option<GaussianBelief<8>>,
    u_last: Vector2<f64>,
    active: Option<Vec<Bound>>,
    stats: Option<SolverStats>,
}

impl Lmpc {
    pub fn new(lm: LinearModel, filter_noise: &NoiseParams, cfg: MpcConfig, prior: InitialBeliefConfig) -> Result<Self> {
        cfg.validate()?;
        filter_noise.validate()?;
        let zoh = discretize_zoh(&lm, cfg.ts)?;
        let filter = LinearFilterModel::new(&lm, filter_noise, cfg.ts)?;
        let n = cfg.horizon;
        let lin = Linearization {
            a: vec![zoh.a; n],
            b: vec![zoh.b; n],
            defects: vec![Vector4::zeros(); n + 1],
        };
        let w = ShootingIterate::constant(Vector4::zeros(), Vector2::zeros(), n);
        let cost = TrackingCost {
            cz: lm.cz,
            q: cfg.q,
            s: cfg.s,
            refs: vec![Vector2::zeros(); n],
            u_prev: Vector2::zeros(),
        };
        let hessian = condense(&lin, &w, &cost, true).h.expect("Hessian requested");
        let factor = Cholesky::new(hessian.clone())
            .ok_or_else(|| Error::MalformedQp("condensed LMPC Hessian is not positive definite".into()))?;
        let u_last = lm.op.u_s;
        Ok(Self {
            cfg,
            lm,
            zoh,
            filter,
            prior,
            hessian,
            factor,
            belief: None,
            u_last,
            active: None,
            stats: None,
        })
    }

    pub fn linear_model(&self) -> &LinearModel {
        &self.lm
    }

    pub fn discrete_model(&self) -> &ZohModel {
        &self.zoh
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    /// Filtered belief in deviation coordinates after the last step.
    pub fn belief(&self) -> Option<&GaussianBelief<8>> {
        self.belief.as_ref()
    }

    /// Condensed QP data `(g, lower, upper)` for a deviation-coordinate state
    /// and disturbance estimate, the horizon references (absolute) and the
    /// previously applied input (absolute).
    pub fn qp_data(
        &self,
        x_dev: &Vector4<f64>,
        d_dev: &Vector4<f64>,
        refs: &[Vector2<f64>],
        u_prev: &Vector2<f64>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let n = self.cfg.horizon;
        let offset = self.zoh.e * d_dev;
        let mut defects = vec![offset; n + 1];
        defects[0] = *x_dev;
        let lin = Linearization {
            a: vec![self.zoh.a; n],
            b: vec![self.zoh.b; n],
            defects,
        };
        let w = ShootingIterate::constant(Vector4::zeros(), Vector2::zeros(), n);
        let cost = TrackingCost {
            cz: self.lm.cz,
            q: self.cfg.q,
            s: self.cfg.s,
            refs: refs.iter().map(|r| r - self.lm.op.z_s).collect(),
            u_prev: u_prev - self.lm.op.u_s,
        };
        let g = condense(&lin, &w, &cost, false).g;
        let u_s = self.lm.op.u_s;
        let lower = DVector::from_fn(2 * n, |k, _| self.cfg.u_min[k % 2] - u_s[k % 2]);
        let upper = DVector::from_fn(2 * n, |k, _| self.cfg.u_max[k % 2] - u_s[k % 2]);
        (g, lower, upper)
    }

    /// Optimal stacked absolute inputs for a given estimate; `None` if the QP fails.
    pub fn optimal_inputs(
        &mut self,
        x_dev: &Vector4<f64>,
        d_dev: &Vector4<f64>,
        refs: &[Vector2<f64>],
        u_prev: &Vector2<f64>,
    ) -> Option<Vec<Vector2<f64>>> {
        let (g, lower, upper) = self.qp_data(x_dev, d_dev, refs, u_prev);
        let qp = BoxQp { h: &self.hessian, g: &g, lower: &lower, upper: &upper };
        let warm = self.active.as_ref().map(|a| shift_active(a));
        let sol = solve_box_qp(&qp, warm.as_deref(), Some(&self.factor), &QpOptions::default());
        let out = match sol {
            Ok(sol) if sol.converged => {
                self.stats = Some(SolverStats {
                    iterations: sol.iterations,
                    qp_iterations: sol.iterations,
                    converged: true,
                    objective: sol.objective,
                    kkt_residual: sol.kkt_residual,
                    fallback: false,
                });
                self.active = Some(sol.active.clone());
                Some(
                    (0..self.cfg.horizon)
                        .map(|j| sol.x.fixed_rows::<2>(2 * j) + self.lm.op.u_s)
                        .collect(),
                )
            }
            other => {
                let (iterations, kkt) = match &other {
                    Ok(s) => (s.iterations, s.kkt_residual),
                    Err(_) => (0, f64::INFINITY),
                };
                self.stats = Some(SolverStats {
                    iterations,
                    qp_iterations: iterations,
                    converged: false,
                    objective: f64::NAN,
                    kkt_residual: kkt,
                    fallback: true,
                });
                self.active = None;
                None
            }
        };
        out
    }
}

/// Previous active set advanced one stage, last stage repeated.
fn shift_active(a: &[Bound]) -> Vec<Bound> {
    let mut out = a[2..].to_vec();
    out.extend_from_slice(&a[a.len() - 2..]);
    out
}

impl Controller for Lmpc {
    fn name(&self) -> &'static str {
        "lmpc"
    }

    fn reset(&mut self) {
        self.belief = None;
        self.u_last = self.lm.op.u_s;
        self.active = None;
        self.stats = None;
    }

    fn step(&mut self, y: &Vector4<f64>, preview: &SetpointPreview, _t: f64) -> Vector2<f64> {
        let prior = match &self.belief {
            None => GaussianBelief::initial(&Vector4::zeros(), &self.prior),
            Some(b) => kf_predict(b, &(self.u_last - self.lm.op.u_s), &self.filter),
        };
        let y_dev = y - self.lm.op.y_s;
        let posterior = match filter_update(&prior, &y_dev, &self.filter.measurement) {
            Ok(upd) => upd.belief,
            Err(_) => prior,
        };
        let refs = self.cfg.references(preview);
        let (x_dev, d_dev) = (posterior.state(), posterior.disturbance());
        self.belief = Some(posterior);
        let u_prev = self.u_last;
        if let Some(inputs) = self.optimal_inputs(&x_dev, &d_dev, &refs, &u_prev) {
            self.u_last = self.cfg.clip(&inputs[0]);
        }
        self.u_last
    }

    fn last_stats(&self) -> Option<SolverStats> {
        self.stats.clone()
    }
}
