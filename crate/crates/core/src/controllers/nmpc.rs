//! Nonlinear MPC: CD-EKF on the augmented model and a multiple-shooting NLP
//! solved by Gauss–Newton SQP, warm-started from the shifted previous solution.

use nalgebra::{Matrix2x4, Matrix4, Vector2, Vector4};

use super::{Controller, MpcConfig, SetpointPreview, SolverStats};
use crate::error::Result;
use crate::estimators::{ekf_predict, filter_update, AugmentedModel, GaussianBelief, InitialBeliefConfig, RK4_STEPS};
use crate::model::DriftModel;
use crate::params::NoiseParams;
use crate::solvers::qp::Bound;
use crate::solvers::sqp::{solve_sqp, NlpProblem, Rk4Shooting, ShootingIterate, SqpOptions, SqpResult, TrackingCost};

#[derive(Clone, Debug)]
pub struct Nmpc<M> {
    pub cfg: MpcConfig,
    pub sqp: SqpOptions,
    filter: AugmentedModel<M>,
    cz: Matrix2x4<f64>,
    x_init: Vector4<f64>,
    u_init: Vector2<f64>,
    prior: InitialBeliefConfig,
    belief: Option<GaussianBelief<8>>,
    u_last: Vector2<f64>,
    warm: Option<ShootingIterate>,
    active: Option<Vec<Bound>>,
    stats: Option<SolverStats>,
}

impl<M: DriftModel> Nmpc<M> {
    /// `x_init`, `u_init` seed the initial belief mean and the input held
    /// before the first sample.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: M,
        c: Matrix4<f64>,
        cz: Matrix2x4<f64>,
        filter_noise: &NoiseParams,
        cfg: MpcConfig,
        prior: InitialBeliefConfig,
        x_init: Vector4<f64>,
        u_init: Vector2<f64>,
    ) -> Result<Self> {
        cfg.validate()?;
        filter_noise.validate()?;
        Ok(Self {
            sqp: SqpOptions::default(),
            filter: AugmentedModel::new(model, c, filter_noise),
            cz,
            x_init,
            u_init,
            prior,
            belief: None,
            u_last: u_init,
            warm: None,
            active: None,
            stats: None,
            cfg,
        })
    }

    pub fn belief(&self) -> Option<&GaussianBelief<8>> {
        self.belief.as_ref()
    }

    /// Solves the NLP for a given state and disturbance estimate, updating
    /// the warm start. Returns the SQP result even when it did not converge.
    pub fn solve(
        &mut self,
        x_hat: &Vector4<f64>,
        d_hat: &Vector4<f64>,
        refs: Vec<Vector2<f64>>,
        u_prev: &Vector2<f64>,
    ) -> Result<SqpResult> {
        let shooting = Rk4Shooting {
            model: &self.filter.dynamics,
            d: *d_hat,
            ts: self.cfg.ts,
            steps: RK4_STEPS,
        };
        let nlp = NlpProblem {
            model: &shooting,
            x0: *x_hat,
            cost: TrackingCost {
                cz: self.cz,
                q: self.cfg.q,
                s: self.cfg.s,
                refs,
                u_prev: *u_prev,
            },
            u_min: self.cfg.u_min,
            u_max: self.cfg.u_max,
        };
        let w0 = match self.warm.take() {
            Some(w) if w.horizon() == self.cfg.horizon => w.shifted(),
            _ => ShootingIterate::constant(*x_hat, *u_prev, self.cfg.horizon),
        };
        let warm_active = self.active.take().map(|a| {
            let mut s = a[2..].to_vec();
            s.extend_from_slice(&a[a.len() - 2..]);
            s
        });
        let res = solve_sqp(&nlp, w0, warm_active.as_deref(), &self.sqp)?;
        let finite = res.iterate.u.iter().all(|u| u.iter().all(|v| v.is_finite()))
            && res.iterate.s.iter().all(|s| s.iter().all(|v| v.is_finite()));
        if finite {
            self.warm = Some(res.iterate.clone());
            self.active = Some(res.active.clone());
        }
        Ok(res)
    }
}

impl<M: DriftModel> Controller for Nmpc<M> {
    fn name(&self) -> &'static str {
        "nmpc"
    }

    fn reset(&mut self) {
        self.belief = None;
        self.u_last = self.u_init;
        self.warm = None;
        self.active = None;
        self.stats = None;
    }

    fn step(&mut self, y: &Vector4<f64>, preview: &SetpointPreview, _t: f64) -> Vector2<f64> {
        let prior = match &self.belief {
            None => GaussianBelief::initial(&self.x_init, &self.prior),
            // A diverged prediction restarts the filter from its prior.
            Some(b) => ekf_predict(b, &self.u_last, &self.filter, self.cfg.ts)
                .unwrap_or_else(|_| GaussianBelief::initial(&self.x_init, &self.prior)),
        };
        let posterior = match filter_update(&prior, y, &self.filter.measurement) {
            Ok(upd) => upd.belief,
            Err(_) => prior,
        };
        let (x_hat, d_hat) = (posterior.state(), posterior.disturbance());
        self.belief = Some(posterior);
        let refs = self.cfg.references(preview);
        let u_prev = self.u_last;
        match self.solve(&x_hat, &d_hat, refs, &u_prev) {
            Ok(res) if res.converged => {
                self.u_last = self.cfg.clip(&res.iterate.u[0]);
                self.stats = Some(SolverStats {
                    iterations: res.iterations,
                    qp_iterations: res.qp_iterations,
                    converged: true,
                    objective: res.objective,
                    kkt_residual: res.kkt_residual,
                    fallback: false,
                });
            }
            other => {
                let (iterations, qp_iterations, kkt) = match &other {
                    Ok(r) => (r.iterations, r.qp_iterations, r.kkt_residual),
                    Err(_) => (0, 0, f64::INFINITY),
                };
                self.stats = Some(SolverStats {
                    iterations,
                    qp_iterations,
                    converged: false,
                    objective: f64::NAN,
                    kkt_residual: kkt,
                    fallback: true,
                });
            }
        }
        self.u_last
    }

    fn last_stats(&self) -> Option<SolverStats> {
        self.stats.clone()
    }
}
