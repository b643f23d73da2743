//! Gauss–Newton SQP for the multiple-shooting tracking problem
//!
//! ```text
//! min  ½ Σ_{j=1..N} ‖C_z s_j − r_j‖²_Q + ½ Σ_{j=0..N−1} ‖u_j − u_{j−1}‖²_S
//! s.t. s_0 = x̂,  s_{j+1} = F(s_j, u_j),  u_min ≤ u_j ≤ u_max
//! ```
//!
//! with `u_{−1}` the last applied input. Each iteration linearizes the
//! shooting constraints, eliminates the state increments (condensing), solves
//! the resulting box QP in the input increments and takes a step on an ℓ1
//! merit function.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix2, Matrix2x4, Matrix4, Matrix4x2, Matrix4x6, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use super::qp::{solve_box_qp, Bound, BoxQp, QpOptions};
use crate::error::{Error, Result};
use crate::model::DriftModel;

/// One-sample shooting map and its sensitivities.
pub trait ShootingModel {
    /// Returns `(F(s, u), ∂F/∂s, ∂F/∂u)`.
    fn step(&self, s: &Vector4<f64>, u: &Vector2<f64>) -> (Vector4<f64>, Matrix4<f64>, Matrix4x2<f64>);
}

/// Affine discrete dynamics `s⁺ = A s + B u + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineShooting {
    pub a: Matrix4<f64>,
    pub b: Matrix4x2<f64>,
    pub c: Vector4<f64>,
}

impl ShootingModel for AffineShooting {
    fn step(&self, s: &Vector4<f64>, u: &Vector2<f64>) -> (Vector4<f64>, Matrix4<f64>, Matrix4x2<f64>) {
        (self.a * s + self.b * u + self.c, self.a, self.b)
    }
}

/// Fixed-step RK4 over one sample with the disturbance frozen; sensitivities
/// are the exact derivatives of the discrete RK4 map.
#[derive(Clone, Debug)]
pub struct Rk4Shooting<M> {
    pub model: M,
    pub d: Vector4<f64>,
    pub ts: f64,
    pub steps: usize,
}

impl<M: DriftModel> ShootingModel for Rk4Shooting<M> {
    fn step(&self, s: &Vector4<f64>, u: &Vector2<f64>) -> (Vector4<f64>, Matrix4<f64>, Matrix4x2<f64>) {
        let h = self.ts / self.steps as f64;
        let bu = self.model.input_matrix();
        let mut fu = Matrix4x6::zeros();
        fu.fixed_columns_mut::<2>(4).copy_from(&bu);
        // Sensitivity of the stage point w.r.t. (s, u), stacked as [∂/∂s ∂/∂u].
        let rhs = |x: &Vector4<f64>, sx: &Matrix4x6<f64>| {
            let j = self.model.jacobian_x(x, u, &self.d);
            (self.model.drift(x, u, &self.d), j * sx + fu)
        };
        let mut x = *s;
        let mut sens = Matrix4x6::zeros();
        sens.fixed_columns_mut::<4>(0).copy_from(&Matrix4::identity());
        for _ in 0..self.steps {
            let (k1, s1) = rhs(&x, &sens);
            let (k2, s2) = rhs(&(x + k1 * (h / 2.0)), &(sens + s1 * (h / 2.0)));
            let (k3, s3) = rhs(&(x + k2 * (h / 2.0)), &(sens + s2 * (h / 2.0)));
            let (k4, s4) = rhs(&(x + k3 * h), &(sens + s3 * h));
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            sens += (s1 + s2 * 2.0 + s3 * 2.0 + s4) * (h / 6.0);
        }
        (
            x,
            sens.fixed_columns::<4>(0).into_owned(),
            sens.fixed_columns::<2>(4).into_owned(),
        )
    }
}

/// Tracking and input-rate weights with the horizon's references.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackingCost {
    pub cz: Matrix2x4<f64>,
    pub q: Matrix2<f64>,
    pub s: Matrix2<f64>,
    /// `r_1 … r_N`.
    pub refs: Vec<Vector2<f64>>,
    pub u_prev: Vector2<f64>,
}

impl TrackingCost {
    pub fn horizon(&self) -> usize {
        self.refs.len()
    }

    /// Objective at a state/input trajectory.
    pub fn value(&self, s: &[Vector4<f64>], u: &[Vector2<f64>]) -> f64 {
        let mut v = 0.0;
        for (j, r) in self.refs.iter().enumerate() {
            let e = self.cz * s[j + 1] - r;
            v += 0.5 * e.dot(&(self.q * e));
        }
        let mut prev = self.u_prev;
        for uj in u {
            let du = uj - prev;
            v += 0.5 * du.dot(&(self.s * du));
            prev = *uj;
        }
        v
    }

    /// Input-rate gradient `∂/∂u_j` of the move term.
    fn move_gradient(&self, u: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
        let n = u.len();
        (0..n)
            .map(|j| {
                let prev = if j == 0 { self.u_prev } else { u[j - 1] };
                let mut g = self.s * (u[j] - prev);
                if j + 1 < n {
                    g -= self.s * (u[j + 1] - u[j]);
                }
                g
            })
            .collect()
    }
}

/// Multiple-shooting decision variables, laid out as
/// `[s_0; u_0; s_1; u_1; …; s_{N−1}; u_{N−1}; s_N]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShootingIterate {
    pub s: Vec<Vector4<f64>>,
    pub u: Vec<Vector2<f64>>,
}

impl ShootingIterate {
    /// Every stage at `x0`, every input at `u0`.
    pub fn constant(x0: Vector4<f64>, u0: Vector2<f64>, horizon: usize) -> Self {
        Self {
            s: vec![x0; horizon + 1],
            u: vec![u0; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.u.len()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.horizon();
        let mut w = DVector::zeros((n + 1) * 4 + n * 2);
        for j in 0..=n {
            w.fixed_rows_mut::<4>(6 * j).copy_from(&self.s[j]);
            if j < n {
                w.fixed_rows_mut::<2>(6 * j + 4).copy_from(&self.u[j]);
            }
        }
        w
    }

    pub fn from_vector(w: &DVector<f64>) -> Result<Self> {
        if w.len() < 4 || (w.len() - 4) % 6 != 0 {
            return Err(Error::InvalidInput(format!("decision vector length {} is not (N+1)·4 + N·2", w.len())));
        }
        let n = (w.len() - 4) / 6;
        Ok(Self {
            s: (0..=n).map(|j| w.fixed_rows::<4>(6 * j).into_owned()).collect(),
            u: (0..n).map(|j| w.fixed_rows::<2>(6 * j + 4).into_owned()).collect(),
        })
    }

    /// Warm start for the next sample: drop the first stage and input, repeat
    /// the final input and the final state.
    pub fn shifted(&self) -> Self {
        let mut s = self.s[1..].to_vec();
        s.push(*self.s.last().expect("non-empty"));
        let mut u = self.u[1..].to_vec();
        u.push(*self.u.last().expect("non-empty"));
        Self { s, u }
    }
}

/// Box QP in the stacked input increments, plus the free state response.
#[derive(Clone, Debug)]
pub struct Condensed {
    pub h: Option<DMatrix<f64>>,
    pub g: DVector<f64>,
    /// `Δs_j` for zero input increments.
    pub free_response: Vec<Vector4<f64>>,
}

/// Linearization of the shooting constraints at an iterate.
#[derive(Clone, Debug)]
pub struct Linearization {
    pub a: Vec<Matrix4<f64>>,
    pub b: Vec<Matrix4x2<f64>>,
    /// `defects[0] = x̂ − s_0`, `defects[j+1] = F(s_j, u_j) − s_{j+1}`.
    pub defects: Vec<Vector4<f64>>,
}

impl Linearization {
    pub fn at(model: &dyn ShootingModel, x0: &Vector4<f64>, w: &ShootingIterate) -> Self {
        let n = w.horizon();
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        let mut defects = Vec::with_capacity(n + 1);
        defects.push(x0 - w.s[0]);
        for j in 0..n {
            let (f, aj, bj) = model.step(&w.s[j], &w.u[j]);
            defects.push(f - w.s[j + 1]);
            a.push(aj);
            b.push(bj);
        }
        Self { a, b, defects }
    }

    pub fn defect_l1(&self) -> f64 {
        self.defects.iter().map(|d| d.lp_norm(1)).sum()
    }

    pub fn defect_max(&self) -> f64 {
        self.defects.iter().map(|d| d.amax()).fold(0.0, f64::max)
    }

    /// Forward recursion `Δs_{j+1} = A_j Δs_j + B_j Δu_j + defect_{j+1}`.
    pub fn state_increments(&self, du: &DVector<f64>) -> Vec<Vector4<f64>> {
        let n = self.a.len();
        let mut ds = Vec::with_capacity(n + 1);
        ds.push(self.defects[0]);
        for j in 0..n {
            let duj = du.fixed_rows::<2>(2 * j).into_owned();
            ds.push(self.a[j] * ds[j] + self.b[j] * duj + self.defects[j + 1]);
        }
        ds
    }
}

/// Condenses the linearized problem at `w` into a QP in `Δu`. The Hessian is
/// assembled in O(N²) through the backward recursion
/// `P_N = M`, `P_j = M + A_j' P_{j+1} A_j` with `M = C_z' Q C_z`; the
/// gradient follows from the adjoint recursion on the tracking errors.
pub fn condense(lin: &Linearization, w: &ShootingIterate, cost: &TrackingCost, with_hessian: bool) -> Condensed {
    let n = w.horizon();
    let free_response = lin.state_increments(&DVector::zeros(2 * n));
    let czq = cost.cz.transpose() * cost.q;

    // Adjoint: λ_N = C_z'Q e_N, λ_j = C_z'Q e_j + A_j' λ_{j+1}; g_i = B_i' λ_{i+1}.
    let mut g = DVector::zeros(2 * n);
    let mut lambda = Vector4::zeros();
    for j in (1..=n).rev() {
        let e = cost.cz * (w.s[j] + free_response[j]) - cost.refs[j - 1];
        lambda = if j == n { czq * e } else { czq * e + lin.a[j].transpose() * lambda };
        g.fixed_rows_mut::<2>(2 * (j - 1)).copy_from(&(lin.b[j - 1].transpose() * lambda));
    }
    for (j, gm) in cost.move_gradient(&w.u).into_iter().enumerate() {
        let mut block = g.fixed_rows_mut::<2>(2 * j);
        block += gm;
    }

    let h = with_hessian.then(|| {
        let m = czq * cost.cz;
        let mut p = vec![Matrix4::zeros(); n + 1];
        p[n] = m;
        for j in (1..n).rev() {
            p[j] = m + lin.a[j].transpose() * p[j + 1] * lin.a[j];
        }
        let mut h = DMatrix::zeros(2 * n, 2 * n);
        for l in 0..n {
            let mut r = lin.b[l].transpose() * p[l + 1];
            let block = r * lin.b[l];
            h.fixed_view_mut::<2, 2>(2 * l, 2 * l).copy_from(&block);
            for i in (0..l).rev() {
                r *= lin.a[i + 1];
                let block = r * lin.b[i];
                h.fixed_view_mut::<2, 2>(2 * l, 2 * i).copy_from(&block);
                h.fixed_view_mut::<2, 2>(2 * i, 2 * l).copy_from(&block.transpose());
            }
        }
        add_move_hessian(&mut h, &cost.s);
        h
    });

    Condensed { h, g, free_response }
}

/// Adds the block-tridiagonal Hessian of `½ Σ ‖u_j − u_{j−1}‖²_S`.
pub fn add_move_hessian(h: &mut DMatrix<f64>, s: &Matrix2<f64>) {
    let n = h.nrows() / 2;
    for j in 0..n {
        let diag = if j + 1 < n { s * 2.0 } else { *s };
        let mut block = h.fixed_view_mut::<2, 2>(2 * j, 2 * j);
        block += diag;
        if j + 1 < n {
            let mut off = h.fixed_view_mut::<2, 2>(2 * j, 2 * j + 2);
            off -= s;
            let mut off = h.fixed_view_mut::<2, 2>(2 * j + 2, 2 * j);
            off -= s.transpose();
        }
    }
}

/// The NLP solved at one sample.
pub struct NlpProblem<'a> {
    pub model: &'a dyn ShootingModel,
    pub x0: Vector4<f64>,
    pub cost: TrackingCost,
    pub u_min: Vector2<f64>,
    pub u_max: Vector2<f64>,
}

impl NlpProblem<'_> {
    pub fn horizon(&self) -> usize {
        self.cost.horizon()
    }

    /// Objective of the single-shooting roll-out of `u` from `x0`.
    pub fn rolled_out_objective(&self, u: &[Vector2<f64>]) -> f64 {
        let mut s = vec![self.x0];
        for uj in u {
            let next = self.model.step(s.last().expect("non-empty"), uj).0;
            s.push(next);
        }
        self.cost.value(&s, u)
    }

    /// Gradient of the condensed objective w.r.t. the inputs at a
    /// constraint-consistent iterate.
    pub fn condensed_gradient(&self, u: &[Vector2<f64>]) -> DVector<f64> {
        let w = self.rollout(u);
        let lin = Linearization::at(self.model, &self.x0, &w);
        condense(&lin, &w, &self.cost, false).g
    }

    /// States consistent with the shooting constraints for inputs `u`.
    pub fn rollout(&self, u: &[Vector2<f64>]) -> ShootingIterate {
        let mut s = vec![self.x0];
        for uj in u {
            let next = self.model.step(s.last().expect("non-empty"), uj).0;
            s.push(next);
        }
        ShootingIterate { s, u: u.to_vec() }
    }

    fn validate(&self, w0: &ShootingIterate) -> Result<()> {
        let n = self.horizon();
        if n == 0 {
            return Err(Error::InvalidInput("horizon must be at least one step".into()));
        }
        if w0.horizon() != n || w0.s.len() != n + 1 {
            return Err(Error::InvalidInput(format!(
                "initial guess has horizon {} but the problem has {n}",
                w0.horizon()
            )));
        }
        let finite = w0.s.iter().flat_map(|v| v.iter()).chain(w0.u.iter().flat_map(|v| v.iter())).all(|v| v.is_finite())
            && self.x0.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("initial guess is not finite".into()));
        }
        if (0..2).any(|i| !(self.u_min[i] <= self.u_max[i])) {
            return Err(Error::InvalidInput("input bounds are inconsistent".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SqpOptions {
    pub max_iter: usize,
    pub step_tol: f64,
    pub kkt_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub min_step: f64,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            step_tol: 1e-6,
            kkt_tol: 1e-6,
            armijo: 1e-4,
            min_step: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SqpResult {
    pub iterate: ShootingIterate,
    pub objective: f64,
    pub iterations: usize,
    pub qp_iterations: usize,
    pub kkt_residual: f64,
    pub converged: bool,
    /// Active set of the last QP, in stacked-input order.
    pub active: Vec<Bound>,
    /// Merit value after every accepted step, starting at the initial guess.
    pub merit_trace: Vec<f64>,
}

fn projected_gradient(u: &[Vector2<f64>], g: &DVector<f64>, lo: &Vector2<f64>, hi: &Vector2<f64>) -> f64 {
    let mut r: f64 = 0.0;
    for (j, uj) in u.iter().enumerate() {
        for i in 0..2 {
            let v = uj[i];
            r = r.max((v - (v - g[2 * j + i]).clamp(lo[i], hi[i])).abs());
        }
    }
    r
}

/// Gauss–Newton SQP with condensing and an ℓ1 merit line search.
/// `qp_warm` seeds the first QP's working set.
pub fn solve_sqp(
    nlp: &NlpProblem,
    w0: ShootingIterate,
    qp_warm: Option<&[Bound]>,
    opts: &SqpOptions,
) -> Result<SqpResult> {
    nlp.validate(&w0)?;
    let n = nlp.horizon();
    let mut w = w0;
    for uj in &mut w.u {
        *uj = uj.zip_zip_map(&nlp.u_min, &nlp.u_max, |v, lo, hi| v.clamp(lo, hi));
    }
    let mut lin = Linearization::at(nlp.model, &nlp.x0, &w);
    let mut f = nlp.cost.value(&w.s, &w.u);
    let mut mu = 1.0;
    let mut active: Vec<Bound> = qp_warm.map(<[Bound]>::to_vec).unwrap_or_else(|| vec![Bound::Free; 2 * n]);
    let mut merit_trace = vec![f + mu * lin.defect_l1()];
    let mut qp_iterations = 0;
    let mut kkt = f64::INFINITY;

    for iter in 0..opts.max_iter {
        let cond = condense(&lin, &w, &nlp.cost, true);
        kkt = projected_gradient(&w.u, &cond.g, &nlp.u_min, &nlp.u_max).max(lin.defect_max());
        if kkt < opts.kkt_tol {
            return Ok(finish(w, f, iter, qp_iterations, kkt, true, active, merit_trace));
        }
        let h = cond.h.expect("Hessian requested");
        let lower = DVector::from_fn(2 * n, |k, _| nlp.u_min[k % 2] - w.u[k / 2][k % 2]);
        let upper = DVector::from_fn(2 * n, |k, _| nlp.u_max[k % 2] - w.u[k / 2][k % 2]);
        let qp = BoxQp { h: &h, g: &cond.g, lower: &lower, upper: &upper };
        let sol = solve_box_qp(&qp, Some(&active), None::<&Cholesky<f64, Dyn>>, &QpOptions::default())?;
        qp_iterations += sol.iterations;
        active = sol.active.clone();
        let du = sol.x;
        let ds = lin.state_increments(&du);

        // Directional derivative of the objective along the step.
        let mut df = 0.0;
        let czq = nlp.cost.cz.transpose() * nlp.cost.q;
        for j in 1..=n {
            let e = nlp.cost.cz * w.s[j] - nlp.cost.refs[j - 1];
            df += (czq * e).dot(&ds[j]);
        }
        for (j, gm) in nlp.cost.move_gradient(&w.u).iter().enumerate() {
            df += gm.dot(&du.fixed_rows::<2>(2 * j));
        }
        let c1 = lin.defect_l1();
        if c1 > 0.0 {
            // Penalty large enough for the step to be a descent direction.
            let needed = df / (0.5 * c1);
            if mu < needed {
                mu = needed + 1e-3;
            }
        }
        let merit0 = f + mu * c1;
        let slope = df - mu * c1;

        let mut alpha = 1.0;
        let accepted = loop {
            let trial = ShootingIterate {
                s: w.s.iter().zip(&ds).map(|(s, d)| s + d * alpha).collect(),
                u: w.u.iter().enumerate().map(|(j, u)| u + du.fixed_rows::<2>(2 * j) * alpha).collect(),
            };
            let trial_lin = Linearization::at(nlp.model, &nlp.x0, &trial);
            let trial_f = nlp.cost.value(&trial.s, &trial.u);
            let trial_merit = trial_f + mu * trial_lin.defect_l1();
            if trial_merit.is_finite() && trial_merit <= merit0 + opts.armijo * alpha * slope.min(0.0) {
                break Some((trial, trial_lin, trial_f, trial_merit));
            }
            alpha *= 0.5;
            if alpha < opts.min_step {
                break None;
            }
        };
        let Some((trial, trial_lin, trial_f, trial_merit)) = accepted else {
            return Ok(finish(w, f, iter + 1, qp_iterations, kkt, false, active, merit_trace));
        };
        let step = alpha * du.amax().max(ds.iter().map(|d| d.amax()).fold(0.0, f64::max));
        w = trial;
        lin = trial_lin;
        f = trial_f;
        merit_trace.push(trial_merit);
        if step < opts.step_tol {
            let cond = condense(&lin, &w, &nlp.cost, false);
            kkt = projected_gradient(&w.u, &cond.g, &nlp.u_min, &nlp.u_max).max(lin.defect_max());
            return Ok(finish(w, f, iter + 1, qp_iterations, kkt, true, active, merit_trace));
        }
    }
    Ok(finish(w, f, opts.max_iter, qp_iterations, kkt, false, active, merit_trace))
}

#[allow(clippy::too_many_arguments)]
fn finish(
    iterate: ShootingIterate,
    objective: f64,
    iterations: usize,
    qp_iterations: usize,
    kkt_residual: f64,
    converged: bool,
    active: Vec<Bound>,
    merit_trace: Vec<f64>,
) -> SqpResult {
    SqpResult {
        iterate,
        objective,
        iterations,
        qp_iterations,
        kkt_residual,
        converged,
        active,
        merit_trace,
    }
}
