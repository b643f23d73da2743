//! Nonlinear quadruple-tank mass balances, their Jacobian, steady states,
//! linearization, cross-coupling transfer functions and ZOH discretization.
//!
//! States are the water masses `m_i` [g], inputs the pump flows `u_j`
//! [cm³/s] and disturbances unknown inflows `d_i` [cm³/s]. Pump 1 feeds
//! tanks 1 and 4, pump 2 feeds tanks 2 and 3; the upper tanks 3 and 4 drain
//! into the lower tanks 1 and 2.

use nalgebra::{Complex, DMatrix, Matrix2x4, Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{to_dmatrix, to_smatrix, zoh};
use crate::params::ModelParams;

/// Levels at or below this are treated as empty when the Jacobian is requested.
pub const HEIGHT_TOL: f64 = 1e-9;

/// Floor applied to levels inside filters and shooting sensitivities so an
/// empty tank yields a large but finite Jacobian entry.
const JACOBIAN_HEIGHT_FLOOR: f64 = 1e-6;

/// Continuous-time drift `f(x, u, d)`, affine in `u` and `d`.
///
/// Shared by the filters and the shooting integrator so that either the
/// nonlinear plant or its linearization can be plugged in.
pub trait DriftModel {
    fn drift(&self, x: &Vector4<f64>, u: &Vector2<f64>, d: &Vector4<f64>) -> Vector4<f64>;

    fn jacobian_x(&self, x: &Vector4<f64>, u: &Vector2<f64>, d: &Vector4<f64>) -> Matrix4<f64>;

    /// `∂f/∂u`, independent of the operating point.
    fn input_matrix(&self) -> Matrix4x2<f64>;

    /// `∂f/∂d`, independent of the operating point.
    fn disturbance_matrix(&self) -> Matrix4<f64>;
}

impl<M: DriftModel + ?Sized> DriftModel for &M {
    fn drift(&self, x: &Vector4<f64>, u: &Vector2<f64>, d: &Vector4<f64>) -> Vector4<f64> {
        (**self).drift(x, u, d)
    }

    fn jacobian_x(&self, x: &Vector4<f64>, u: &Vector2<f64>, d: &Vector4<f64>) -> Matrix4<f64> {
        (**self).jacobian_x(x, u, d)
    }

    fn input_matrix(&self) -> Matrix4x2<f64> {
        (**self).input_matrix()
    }

    fn disturbance_matrix(&self) -> Matrix4<f64> {
        (**self).disturbance_matrix()
    }
}

/// The nonlinear process with its parameter-derived constants precomputed.
#[derive(Clone, Debug)]
pub struct QuadTank {
    params: ModelParams,
    /// `a_i √(2 g_a)`: outflow per √cm of level.
    outflow_coeff: Vector4<f64>,
    /// `1 / (ρ A_i)`: level per gram.
    level_per_mass: Vector4<f64>,
    b: Matrix4x2<f64>,
}

impl QuadTank {
    pub fn new(params: ModelParams) -> Result<Self> {
        params.validate()?;
        let outflow_coeff = params.a_vec() * (2.0 * params.g_a).sqrt();
        let level_per_mass = params.area_vec().map(|a| 1.0 / (params.rho * a));
        let b = input_matrix(&params);
        Ok(Self {
            params,
            outflow_coeff,
            level_per_mass,
            b,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Levels with negative masses clamped to an empty tank.
    pub fn heights(&self, x: &Vector4<f64>) -> Vector4<f64> {
        x.map(|m| m.max(0.0)).component_mul(&self.level_per_mass)
    }

    pub fn outflows(&self, x: &Vector4<f64>) -> Vector4<f64> {
        self.heights(x).map(f64::sqrt).component_mul(&self.outflow_coeff)
    }

    pub fn inflows(&self, x: &Vector4<f64>, u: &Vector2<f64>, d: &Vector4<f64>) -> Vector4<f64> {
        let q_out = self.outflows(x);
        let [g1, g2] = self.params.gamma;
        Vector4::new(
            g1 * u[0] + q_out[2] + d[0],
            g2 * u[1] + q_out[3] + d[1],
            (1.0 - g2) * u[1] + d[2],
            (1.0 - g1) * u[0] + d[3],
        )
    }

    /// Measured levels `y = C x` [cm].
    pub fn measurement(&self, x: &Vector4<f64>) -> Vector4<f64> {
        x.component_mul(&self.level_per_mass)
    }

    /// Controlled levels (lower tanks) [cm].
    pub fn output(&self, x: &Vector4<f64>) -> Vector2<f64> {
        Vector2::new(x[0] * self.level_per_mass[0], x[1] * self.level_per_mass[1])
    }

    pub fn measurement_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_diagonal(&self.level_per_mass)
    }

    pub fn output_matrix(&self) -> Matrix2x4<f64> {
        let mut cz = Matrix2x4::zeros();
        cz[(0, 0)] = self.level_per_mass[0];
        cz[(1, 1)] = self.level_per_mass[1];
        cz
    }

    fn jacobian_from_heights(&self, h: &Vector4<f64>) -> Matrix4<f64> {
        // ∂(ρ q_out,i)/∂m_i = a_i √(2 g_a) / (2 A_i √h_i)
        let slope = Vector4::from_fn(|i, _| {
            self.outflow_coeff[i] / (2.0 * self.params.area[i] * h[i].sqrt())
        });
        let mut a = Matrix4::from_diagonal(&(-slope));
        a[(0, 2)] = slope[2];
        a[(1, 3)] = slope[3];
        a
    }
}

impl DriftModel for QuadTank {
    fn drift(&self, x: &Vector4<f64>, u: &Vector2<f64>, d: &Vector4<f64>) -> Vector4<f64> {
        let q_out = self.outflows(x);
        let q_in = self.inflows(x, u, d);
        (q_in - q_out) * self.params.rho
    }

    fn jacobian_x(&self, x: &Vector4<f64>, _u: &Vector2<f64>, _d: &Vector4<f64>) -> Matrix4<f64> {
        let h = self.heights(x).map(|h| h.max(JACOBIAN_HEIGHT_FLOOR));
        self.jacobian_from_heights(&h)
    }

    fn input_matrix(&self) -> Matrix4x2<f64> {
        self.b
    }

    fn disturbance_matrix(&self) -> Matrix4<f64> {
        Matrix4::identity() * self.params.rho
    }
}

fn input_matrix(p: &ModelParams) -> Matrix4x2<f64> {
    let [g1, g2] = p.gamma;
    // Row 4 is (1 − γ1) u1: pump 1 feeds tank 4.
    Matrix4x2::new(g1, 0.0, 0.0, g2, 0.0, 1.0 - g2, 1.0 - g1, 0.0) * p.rho
}

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{name} contains non-finite entries")))
    }
}

/// Mass balance `ρ (q_in − q_out)` [g/s] with levels clamped at zero.
pub fn drift(
    x: &Vector4<f64>,
    u: &Vector2<f64>,
    d: &Vector4<f64>,
    p: &ModelParams,
) -> Result<Vector4<f64>> {
    check_finite("x", x.as_slice())?;
    check_finite("u", u.as_slice())?;
    check_finite("d", d.as_slice())?;
    if u.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidInput(format!("pump flows must be non-negative, got {u:?}")));
    }
    Ok(QuadTank::new(p.clone())?.drift(x, u, d))
}

pub fn measurement(x: &Vector4<f64>, p: &ModelParams) -> Vector4<f64> {
    x.zip_map(&p.area_vec(), |m, a| m / (p.rho * a))
}

pub fn output(x: &Vector4<f64>, p: &ModelParams) -> Vector2<f64> {
    let y = measurement(x, p);
    Vector2::new(y[0], y[1])
}

/// Analytic `∂f/∂x`. Fails when a tank is (numerically) empty, where the
/// square-root outflow law has an infinite slope.
pub fn drift_jacobian(
    x: &Vector4<f64>,
    _u: &Vector2<f64>,
    _d: &Vector4<f64>,
    p: &ModelParams,
) -> Result<Matrix4<f64>> {
    check_finite("x", x.as_slice())?;
    let plant = QuadTank::new(p.clone())?;
    let h = plant.heights(x);
    if let Some(i) = (0..4).find(|&i| h[i] <= HEIGHT_TOL) {
        return Err(Error::SingularJacobian {
            tank: i + 1,
            height: h[i],
        });
    }
    Ok(plant.jacobian_from_heights(&h))
}

/// Steady-state masses for constant `u` and `d`, solved tank by tank: upper
/// tanks first, then the lower tanks they drain into, each from
/// `q_in = a √(2 g_a h)`.
pub fn steady_state(u: &Vector2<f64>, d: &Vector4<f64>, p: &ModelParams) -> Result<Vector4<f64>> {
    p.validate()?;
    check_finite("u", u.as_slice())?;
    check_finite("d", d.as_slice())?;
    let [g1, g2] = p.gamma;
    let level = |tank: usize, q_in: f64| -> Result<f64> {
        if q_in < 0.0 {
            return Err(Error::InfeasibleSteadyState { tank: tank + 1, inflow: q_in });
        }
        Ok((q_in / p.a[tank]).powi(2) / (2.0 * p.g_a))
    };
    let q3 = (1.0 - g2) * u[1] + d[2];
    let q4 = (1.0 - g1) * u[0] + d[3];
    let h3 = level(2, q3)?;
    let h4 = level(3, q4)?;
    // At steady state each upper tank passes its whole inflow down.
    let h1 = level(0, g1 * u[0] + q3 + d[0])?;
    let h2 = level(1, g2 * u[1] + q4 + d[1])?;
    let h = Vector4::new(h1, h2, h3, h4);
    Ok(h.zip_map(&p.area_vec(), |h, a| h * p.rho * a))
}

/// Linearization point `(x_s, u_s, d_s, y_s, z_s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub x_s: Vector4<f64>,
    pub u_s: Vector2<f64>,
    pub d_s: Vector4<f64>,
    pub y_s: Vector4<f64>,
    pub z_s: Vector2<f64>,
}

impl OperatingPoint {
    /// Solves for the steady state belonging to `(u_s, d_s)`.
    pub fn from_inputs(u_s: Vector2<f64>, d_s: Vector4<f64>, p: &ModelParams) -> Result<Self> {
        let x_s = steady_state(&u_s, &d_s, p)?;
        Ok(Self {
            x_s,
            u_s,
            d_s,
            y_s: measurement(&x_s, p),
            z_s: output(&x_s, p),
        })
    }
}

/// Deviation model `dX = (A X + B U + E D) dt`, `Y = C X`, `Z = Cz X`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub a: Matrix4<f64>,
    pub b: Matrix4x2<f64>,
    pub e: Matrix4<f64>,
    pub c: Matrix4<f64>,
    pub cz: Matrix2x4<f64>,
    pub op: OperatingPoint,
}

pub fn linearize(p: &ModelParams, op: &OperatingPoint) -> Result<LinearModel> {
    let plant = QuadTank::new(p.clone())?;
    let residual = plant.drift(&op.x_s, &op.u_s, &op.d_s);
    let scale = 1.0 + op.u_s.amax() + op.d_s.amax();
    if residual.amax() > 1e-8 * scale {
        return Err(Error::InvalidInput(format!(
            "operating point is not a steady state (drift residual {:.3e} g/s)",
            residual.amax()
        )));
    }
    Ok(LinearModel {
        a: drift_jacobian(&op.x_s, &op.u_s, &op.d_s, p)?,
        b: plant.input_matrix(),
        e: plant.disturbance_matrix(),
        c: plant.measurement_matrix(),
        cz: plant.output_matrix(),
        op: op.clone(),
    })
}

impl LinearModel {
    /// `Cz (-A)⁻¹ B`: steady-state gains from inputs to controlled levels.
    pub fn dc_gain(&self) -> Result<nalgebra::Matrix2<f64>> {
        let inv = (-self.a)
            .try_inverse()
            .ok_or_else(|| Error::InvalidInput("A is singular".into()))?;
        Ok(self.cz * inv * self.b)
    }

    pub fn max_real_eigenvalue(&self) -> f64 {
        self.a
            .complex_eigenvalues()
            .iter()
            .map(|l| l.re)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// The linearization viewed as an absolute-coordinate drift
/// `f(x, u, d) = A (x − x_s) + B (u − u_s) + E (d − d_s)`.
#[derive(Clone, Debug)]
pub struct LinearDrift {
    pub model: LinearModel,
}

impl DriftModel for LinearDrift {
    fn drift(&self, x: &Vector4<f64>, u: &Vector2<f64>, d: &Vector4<f64>) -> Vector4<f64> {
        let op = &self.model.op;
        self.model.a * (x - op.x_s) + self.model.b * (u - op.u_s) + self.model.e * (d - op.d_s)
    }

    fn jacobian_x(&self, _x: &Vector4<f64>, _u: &Vector2<f64>, _d: &Vector4<f64>) -> Matrix4<f64> {
        self.model.a
    }

    fn input_matrix(&self) -> Matrix4x2<f64> {
        self.model.b
    }

    fn disturbance_matrix(&self) -> Matrix4<f64> {
        self.model.e
    }
}

/// `k / ((τ1 s + 1)(τ2 s + 1))` with `τ1 ≥ τ2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderTf {
    pub k: f64,
    pub tau1: f64,
    pub tau2: f64,
}

impl SecondOrderTf {
    pub fn eval(&self, s: Complex<f64>) -> Complex<f64> {
        let one = Complex::new(1.0, 0.0);
        Complex::new(self.k, 0.0) / ((s * self.tau1 + one) * (s * self.tau2 + one))
    }
}

/// Second-order chain from an upper tank into a lower tank; the time
/// constants are the negative reciprocals of the two diagonal entries.
fn chain_tf(lm: &LinearModel, lower: usize, upper: usize, dc: f64) -> SecondOrderTf {
    let t_lower = -1.0 / lm.a[(lower, lower)];
    let t_upper = -1.0 / lm.a[(upper, upper)];
    SecondOrderTf {
        k: dc,
        tau1: t_lower.max(t_upper),
        tau2: t_lower.min(t_upper),
    }
}

/// Cross-coupling transfer functions `(g12, g21)`: `u2 → z1` through tank 3
/// into tank 1, and `u1 → z2` through tank 4 into tank 2.
pub fn cross_coupling_tfs(lm: &LinearModel) -> Result<(SecondOrderTf, SecondOrderTf)> {
    let worst = lm.max_real_eigenvalue();
    if worst >= 0.0 {
        return Err(Error::NotHurwitz(worst));
    }
    let dc = lm.dc_gain()?;
    Ok((
        chain_tf(lm, 0, 2, dc[(0, 1)]),
        chain_tf(lm, 1, 3, dc[(1, 0)]),
    ))
}

/// Discrete-time model under zero-order hold.
#[derive(Clone, Debug, PartialEq)]
pub struct ZohModel {
    pub a: Matrix4<f64>,
    pub b: Matrix4x2<f64>,
    pub e: Matrix4<f64>,
    pub ts: f64,
}

pub fn discretize_zoh(lm: &LinearModel, ts: f64) -> Result<ZohModel> {
    if !(ts.is_finite() && ts > 0.0) {
        return Err(Error::InvalidInput(format!("sample time must be positive, got {ts}")));
    }
    let mut inputs = DMatrix::zeros(4, 6);
    inputs.view_mut((0, 0), (4, 2)).copy_from(&lm.b);
    inputs.view_mut((0, 2), (4, 4)).copy_from(&lm.e);
    let (ad, gd) = zoh(&to_dmatrix(&lm.a), &inputs, ts);
    Ok(ZohModel {
        a: to_smatrix(&ad),
        b: to_smatrix(&gd.columns(0, 2).into_owned()),
        e: to_smatrix(&gd.columns(2, 4).into_owned()),
        ts,
    })
}
