//! Continuous-discrete Kalman filtering on the disturbance-augmented model.
//!
//! Beliefs are generic over the state dimension `N`: `N = 8` carries the
//! masses and the integrating disturbances `[x; d]`, `N = 4` the masses only
//! (disturbances fixed at zero). The extended filter propagates mean and
//! covariance through the nonlinear drift with RK4; the linear filter uses the
//! exact discretization of the augmented linearization.

use nalgebra::{Cholesky, DMatrix, Matrix4, SMatrix, SVector, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, to_dmatrix, to_smatrix, van_loan, zoh};
use crate::model::{DriftModel, LinearModel};
use crate::params::NoiseParams;

/// Integration steps per sample for the mean and covariance ODEs.
pub const RK4_STEPS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief<const N: usize = 8> {
    pub mean: SVector<f64, N>,
    pub cov: SMatrix<f64, N, N>,
}

/// Prior standard deviations of the initial belief.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialBeliefConfig {
    /// Per-tank mass standard deviation [g].
    pub state_std: f64,
    /// Per-tank disturbance standard deviation [cm³/s].
    pub disturbance_std: f64,
}

impl Default for InitialBeliefConfig {
    fn default() -> Self {
        Self {
            state_std: 10.0,
            disturbance_std: 5.0,
        }
    }
}

impl<const N: usize> GaussianBelief<N> {
    pub fn new(mean: SVector<f64, N>, cov: SMatrix<f64, N, N>) -> Self {
        assert!(N == 4 || N == 8, "beliefs hold 4 states or 4 states plus 4 disturbances");
        Self { mean, cov }
    }

    /// Mean `[x0; 0]` with a diagonal prior covariance.
    pub fn initial(x0: &Vector4<f64>, cfg: &InitialBeliefConfig) -> Self {
        let mut mean = SVector::<f64, N>::zeros();
        mean.fixed_rows_mut::<4>(0).copy_from(x0);
        let cov = SMatrix::from_diagonal(&SVector::from_fn(|i, _| {
            if i < 4 {
                cfg.state_std.powi(2)
            } else {
                cfg.disturbance_std.powi(2)
            }
        }));
        Self::new(mean, cov)
    }

    pub fn state(&self) -> Vector4<f64> {
        self.mean.fixed_rows::<4>(0).into_owned()
    }

    pub fn disturbance(&self) -> Vector4<f64> {
        if N > 4 {
            self.mean.fixed_rows::<4>(4).into_owned()
        } else {
            Vector4::zeros()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(self.cov.iter()).all(|v| v.is_finite())
    }
}

/// Linear measurement `y = C x + v` on the mass block, `v ~ N(0, R)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementModel {
    pub c: Matrix4<f64>,
    pub r: Matrix4<f64>,
}

impl MeasurementModel {
    pub fn new(c: Matrix4<f64>, noise: &NoiseParams) -> Self {
        Self {
            c,
            r: Matrix4::from_diagonal(&Vector4::from(noise.r2)),
        }
    }

    fn augmented<const N: usize>(&self) -> SMatrix<f64, 4, N> {
        let mut ca = SMatrix::<f64, 4, N>::zeros();
        ca.fixed_columns_mut::<4>(0).copy_from(&self.c);
        ca
    }
}

/// Drift plus diffusion and measurement model for the extended filter.
#[derive(Clone, Debug)]
pub struct AugmentedModel<M> {
    pub dynamics: M,
    /// Diffusion diagonal `[σ; σ_d]`; a 4-state belief uses the first half.
    pub sigma_a: [f64; 8],
    pub measurement: MeasurementModel,
    /// RK4 substeps per sample for the mean and covariance ODEs.
    pub rk4_steps: usize,
}

impl<M: DriftModel> AugmentedModel<M> {
    pub fn new(dynamics: M, c: Matrix4<f64>, noise: &NoiseParams) -> Self {
        Self {
            dynamics,
            sigma_a: noise.sigma_augmented(),
            measurement: MeasurementModel::new(c, noise),
            rk4_steps: RK4_STEPS,
        }
    }

    fn diffusion<const N: usize>(&self) -> SMatrix<f64, N, N> {
        SMatrix::from_diagonal(&SVector::from_fn(|i, _| self.sigma_a[i].powi(2)))
    }

    /// Augmented drift: masses follow `f(x, u, d)`, disturbances stay frozen.
    fn augmented_drift<const N: usize>(&self, s: &SVector<f64, N>, u: &Vector2<f64>) -> SVector<f64, N> {
        let (x, d) = split(s);
        let mut out = SVector::<f64, N>::zeros();
        out.fixed_rows_mut::<4>(0).copy_from(&self.dynamics.drift(&x, u, &d));
        out
    }

    fn augmented_jacobian<const N: usize>(&self, s: &SVector<f64, N>, u: &Vector2<f64>) -> SMatrix<f64, N, N> {
        let (x, d) = split(s);
        let mut a = SMatrix::<f64, N, N>::zeros();
        a.fixed_view_mut::<4, 4>(0, 0).copy_from(&self.dynamics.jacobian_x(&x, u, &d));
        if N > 4 {
            a.fixed_view_mut::<4, 4>(0, 4).copy_from(&self.dynamics.disturbance_matrix());
        }
        a
    }
}

fn split<const N: usize>(s: &SVector<f64, N>) -> (Vector4<f64>, Vector4<f64>) {
    let x = s.fixed_rows::<4>(0).into_owned();
    let d = if N > 4 {
        s.fixed_rows::<4>(4).into_owned()
    } else {
        Vector4::zeros()
    };
    (x, d)
}

/// Result of a measurement update.
#[derive(Clone, Debug)]
pub struct FilterUpdate<const N: usize> {
    pub belief: GaussianBelief<N>,
    pub innovation: Vector4<f64>,
    pub innovation_cov: Matrix4<f64>,
    pub gain: SMatrix<f64, N, 4>,
    /// `ln det R_e`.
    pub ln_det: f64,
    /// `e' R_e⁻¹ e`.
    pub mahalanobis: f64,
}

/// Measurement update with a Joseph-form covariance. A non-positive-definite
/// innovation covariance is reported as `SingularInnovation(0)`; sequence
/// drivers replace the index with the failing sample.
pub fn filter_update<const N: usize>(
    b: &GaussianBelief<N>,
    y: &Vector4<f64>,
    m: &MeasurementModel,
) -> Result<FilterUpdate<N>> {
    let ca = m.augmented::<N>();
    let innovation = y - ca * b.mean;
    let pct = b.cov * ca.transpose();
    let mut innovation_cov = m.r + ca * pct;
    symmetrize(&mut innovation_cov);
    let chol = Cholesky::new(innovation_cov).ok_or(Error::SingularInnovation(0))?;
    let gain: SMatrix<f64, N, 4> = chol.solve(&pct.transpose()).transpose();
    let mean = b.mean + gain * innovation;
    let ikc = SMatrix::<f64, N, N>::identity() - gain * ca;
    let mut cov = ikc * b.cov * ikc.transpose() + gain * m.r * gain.transpose();
    symmetrize(&mut cov);
    let whitened = chol.solve(&innovation);
    Ok(FilterUpdate {
        belief: GaussianBelief { mean, cov },
        innovation,
        innovation_cov,
        gain,
        ln_det: chol.ln_determinant(),
        mahalanobis: innovation.dot(&whitened),
    })
}

/// One-sample prediction of mean and covariance through the (possibly
/// nonlinear) drift: `dx̂/dt = f(x̂, u, d̂)`, `dP/dt = A P + P A' + σ σ'`,
/// with `A` re-evaluated at every RK4 stage.
pub fn ekf_predict<const N: usize, M: DriftModel>(
    b: &GaussianBelief<N>,
    u: &Vector2<f64>,
    m: &AugmentedModel<M>,
    ts: f64,
) -> Result<GaussianBelief<N>> {
    if !(ts > 0.0) {
        return Err(Error::InvalidInput(format!("sample time must be positive, got {ts}")));
    }
    let q = m.diffusion::<N>();
    let steps = m.rk4_steps.max(1);
    let h = ts / steps as f64;
    let rhs = |s: &SVector<f64, N>, p: &SMatrix<f64, N, N>| {
        let a = m.augmented_jacobian(s, u);
        let ap = a * p;
        (m.augmented_drift(s, u), ap + ap.transpose() + q)
    };
    let (mut s, mut p) = (b.mean, b.cov);
    for _ in 0..steps {
        let (k1s, k1p) = rhs(&s, &p);
        let (k2s, k2p) = rhs(&(s + k1s * (h / 2.0)), &(p + k1p * (h / 2.0)));
        let (k3s, k3p) = rhs(&(s + k2s * (h / 2.0)), &(p + k2p * (h / 2.0)));
        let (k4s, k4p) = rhs(&(s + k3s * h), &(p + k3p * h));
        s += (k1s + k2s * 2.0 + k3s * 2.0 + k4s) * (h / 6.0);
        p += (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (h / 6.0);
    }
    symmetrize(&mut p);
    let out = GaussianBelief { mean: s, cov: p };
    if out.is_finite() {
        Ok(out)
    } else {
        Err(Error::FilterDiverged(0))
    }
}

/// Exact discretization of the augmented linearization
/// `A_a = [[A, E], [0, 0]]`, `B_a = [B; 0]` in deviation coordinates.
#[derive(Clone, Debug)]
pub struct LinearFilterModel {
    pub transition: SMatrix<f64, 8, 8>,
    pub input: SMatrix<f64, 8, 2>,
    pub process_cov: SMatrix<f64, 8, 8>,
    pub measurement: MeasurementModel,
    pub ts: f64,
}

impl LinearFilterModel {
    pub fn new(lm: &LinearModel, noise: &NoiseParams, ts: f64) -> Result<Self> {
        if !(ts > 0.0) {
            return Err(Error::InvalidInput(format!("sample time must be positive, got {ts}")));
        }
        let mut aa = DMatrix::zeros(8, 8);
        aa.view_mut((0, 0), (4, 4)).copy_from(&lm.a);
        aa.view_mut((0, 4), (4, 4)).copy_from(&lm.e);
        let mut ba = DMatrix::zeros(8, 2);
        ba.view_mut((0, 0), (4, 2)).copy_from(&lm.b);
        let q = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            8,
            noise.sigma_augmented().iter().map(|s| s * s),
        ));
        let (phi, gamma) = zoh(&aa, &ba, ts);
        let (_, qd) = van_loan(&aa, &q, ts);
        Ok(Self {
            transition: to_smatrix(&phi),
            input: to_smatrix(&gamma),
            process_cov: to_smatrix(&qd),
            measurement: MeasurementModel::new(lm.c, noise),
            ts,
        })
    }

    /// `A_a` as a dense matrix, mostly for tests and diagnostics.
    pub fn continuous_matrix(lm: &LinearModel) -> DMatrix<f64> {
        let mut aa = to_dmatrix(&SMatrix::<f64, 8, 8>::zeros());
        aa.view_mut((0, 0), (4, 4)).copy_from(&lm.a);
        aa.view_mut((0, 4), (4, 4)).copy_from(&lm.e);
        aa
    }
}

/// Prediction of the linear filter; `u_dev` is the input deviation from `u_s`.
pub fn kf_predict(b: &GaussianBelief<8>, u_dev: &Vector2<f64>, m: &LinearFilterModel) -> GaussianBelief<8> {
    let mean = m.transition * b.mean + m.input * u_dev;
    let mut cov = m.transition * b.cov * m.transition.transpose() + m.process_cov;
    symmetrize(&mut cov);
    GaussianBelief { mean, cov }
}

/// Innovation and its covariance at one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Innovation {
    pub e: Vector4<f64>,
    pub re: Matrix4<f64>,
    pub ln_det: f64,
    pub mahalanobis: f64,
}

/// Runs update/predict over a time-aligned record, calling `visit` with each
/// sample's update. Stops at the first failure, tagged with its sample index.
pub fn for_each_innovation<const N: usize, M: DriftModel>(
    y: &[[f64; 4]],
    u: &[[f64; 2]],
    m: &AugmentedModel<M>,
    initial: &GaussianBelief<N>,
    ts: f64,
    mut visit: impl FnMut(usize, &FilterUpdate<N>),
) -> Result<GaussianBelief<N>> {
    if y.len() != u.len() {
        return Err(Error::InvalidInput(format!(
            "measurement and input records differ in length ({} vs {})",
            y.len(),
            u.len()
        )));
    }
    let mut belief = initial.clone();
    for k in 0..y.len() {
        let upd = filter_update(&belief, &Vector4::from(y[k]), &m.measurement)
            .map_err(|_| Error::SingularInnovation(k))?;
        visit(k, &upd);
        if k + 1 < y.len() {
            belief = ekf_predict(&upd.belief, &Vector2::from(u[k]), m, ts).map_err(|_| Error::FilterDiverged(k))?;
        } else {
            belief = upd.belief;
        }
    }
    Ok(belief)
}

/// Full innovation sequence of the extended filter over a record.
pub fn innovation_sequence<const N: usize, M: DriftModel>(
    y: &[[f64; 4]],
    u: &[[f64; 2]],
    m: &AugmentedModel<M>,
    initial: &GaussianBelief<N>,
    ts: f64,
) -> Result<Vec<Innovation>> {
    let mut out = Vec::with_capacity(y.len());
    for_each_innovation(y, u, m, initial, ts, |_, upd| {
        out.push(Innovation {
            e: upd.innovation,
            re: upd.innovation_cov,
            ln_det: upd.ln_det,
            mahalanobis: upd.mahalanobis,
        })
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{linearize, LinearDrift, OperatingPoint, QuadTank};
    use crate::params::ModelParams;

    fn setup() -> (QuadTank, LinearModel) {
        let p = ModelParams::nominal();
        let op = OperatingPoint::from_inputs(Vector2::new(300.0, 300.0), Vector4::zeros(), &p).unwrap();
        let lm = linearize(&p, &op).unwrap();
        (QuadTank::new(p).unwrap(), lm)
    }

    #[test]
    fn zero_innovation_leaves_mean() {
        let (plant, lm) = setup();
        let b = GaussianBelief::<8>::initial(&lm.op.x_s, &InitialBeliefConfig::default());
        let mm = MeasurementModel::new(plant.measurement_matrix(), &NoiseParams::simulation_default());
        let upd = filter_update(&b, &lm.op.y_s, &mm).unwrap();
        assert!((upd.belief.mean - b.mean).amax() < 1e-9);
        assert!(upd.innovation.amax() < 1e-12);
    }

    #[test]
    fn uninformative_measurement_keeps_prior() {
        let (plant, lm) = setup();
        let b = GaussianBelief::<8>::initial(&lm.op.x_s, &InitialBeliefConfig::default());
        let mut noise = NoiseParams::simulation_default();
        noise.r2 = [1e12; 4];
        let mm = MeasurementModel::new(plant.measurement_matrix(), &noise);
        let y = lm.op.y_s + Vector4::repeat(3.0);
        let upd = filter_update(&b, &y, &mm).unwrap();
        assert!(((upd.belief.mean - b.mean).amax() / b.mean.amax()) < 1e-6);
        assert!((upd.belief.cov - b.cov).amax() / b.cov.amax() < 1e-6);
    }

    #[test]
    fn scalar_channels_match_textbook_update() {
        // With C = I and diagonal P, R every channel is an independent scalar filter.
        let p0 = [4.0, 0.5, 9.0, 1.0];
        let r = [1.0, 2.0, 0.25, 1.0];
        let b = GaussianBelief::<4>::new(
            Vector4::new(1.0, -2.0, 0.5, 3.0),
            Matrix4::from_diagonal(&Vector4::from(p0)),
        );
        let mm = MeasurementModel {
            c: Matrix4::identity(),
            r: Matrix4::from_diagonal(&Vector4::from(r)),
        };
        let y = Vector4::new(2.0, -1.0, 0.0, 3.5);
        let upd = filter_update(&b, &y, &mm).unwrap();
        for i in 0..4 {
            let k = p0[i] / (p0[i] + r[i]);
            let m = b.mean[i] + k * (y[i] - b.mean[i]);
            let var = p0[i] * r[i] / (p0[i] + r[i]);
            assert!((upd.belief.mean[i] - m).abs() < 1e-14);
            assert!((upd.belief.cov[(i, i)] - var).abs() < 1e-14);
        }
        let expected_ln_det: f64 = (0..4).map(|i| (p0[i] + r[i]).ln()).sum();
        assert!((upd.ln_det - expected_ln_det).abs() < 1e-13);
    }

    #[test]
    fn singular_innovation_is_reported() {
        let b = GaussianBelief::<4>::new(Vector4::zeros(), Matrix4::zeros());
        let mm = MeasurementModel {
            c: Matrix4::identity(),
            r: Matrix4::zeros(),
        };
        assert!(matches!(
            filter_update(&b, &Vector4::zeros(), &mm),
            Err(Error::SingularInnovation(_))
        ));
    }

    #[test]
    fn noiseless_prediction_keeps_zero_covariance() {
        let (plant, lm) = setup();
        let c = plant.measurement_matrix();
        let m = AugmentedModel::new(plant, c, &NoiseParams::zero());
        let b = GaussianBelief::<8>::new(
            {
                let mut s = SVector::<f64, 8>::zeros();
                s.fixed_rows_mut::<4>(0).copy_from(&lm.op.x_s);
                s
            },
            SMatrix::zeros(),
        );
        let next = ekf_predict(&b, &lm.op.u_s, &m, 5.0).unwrap();
        assert_eq!(next.cov, SMatrix::<f64, 8, 8>::zeros());
        assert!((next.state() - lm.op.x_s).amax() < 1e-9);
    }

    #[test]
    fn extended_and_linear_filters_agree_on_linear_drift() {
        let (_, lm) = setup();
        let noise = NoiseParams::simulation_default();
        let lfm = LinearFilterModel::new(&lm, &noise, 5.0).unwrap();
        let mut ekf = AugmentedModel::new(LinearDrift { model: lm.clone() }, lm.c, &noise);

        let mut dev = GaussianBelief::<8>::initial(&Vector4::new(40.0, -25.0, 10.0, 5.0), &InitialBeliefConfig::default());
        dev.mean.fixed_rows_mut::<4>(4).copy_from(&Vector4::new(3.0, -1.0, 2.0, 0.5));
        let mut abs = dev.clone();
        abs.mean.fixed_rows_mut::<4>(0).copy_from(&(dev.state() + lm.op.x_s));

        let u_dev = Vector2::new(12.0, -7.0);
        let kf = kf_predict(&dev, &u_dev, &lfm);
        // The filters agree up to the RK4 truncation error, which shrinks as h⁴.
        let mut gaps = Vec::new();
        for steps in [RK4_STEPS, 100] {
            ekf.rk4_steps = steps;
            let ek = ekf_predict(&abs, &(lm.op.u_s + u_dev), &ekf, 5.0).unwrap();
            let mean_gap = (ek.state() - lm.op.x_s - kf.state()).amax() / ek.state().amax();
            let cov_gap = (ek.cov - kf.cov).amax() / kf.cov.amax();
            gaps.push(mean_gap.max(cov_gap));
        }
        assert!(gaps[0] < 1e-8, "{gaps:?}");
        assert!(gaps[1] < 1e-10, "{gaps:?}");
        assert_eq!(kf.disturbance(), dev.disturbance());
    }

    #[test]
    fn joseph_update_does_not_grow_trace() {
        let (plant, lm) = setup();
        let mm = MeasurementModel::new(plant.measurement_matrix(), &NoiseParams::simulation_default());
        let mut b = GaussianBelief::<8>::initial(&lm.op.x_s, &InitialBeliefConfig::default());
        b.cov[(0, 4)] = 30.0;
        b.cov[(4, 0)] = 30.0;
        let upd = filter_update(&b, &(lm.op.y_s + Vector4::repeat(0.2)), &mm).unwrap();
        assert!(upd.belief.cov.trace() <= b.cov.trace());
        assert!((upd.belief.cov - upd.belief.cov.transpose()).amax() == 0.0);
    }
}
