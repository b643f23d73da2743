//! Maximum-likelihood prediction-error identification driven by the CD-EKF,
//! goodness of fit, and steady-state noise-covariance estimation.

use std::path::Path;

use nalgebra::{Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{for_each_innovation, AugmentedModel, GaussianBelief, InitialBeliefConfig};
use crate::model::QuadTank;
use crate::params::{ModelParams, NoiseParams};
use crate::rng::NormalRng;
use crate::simulator::{measure, sde_step, simulate_deterministic, TrajectoryLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetLabel {
    Estimation,
    Validation,
}

/// Time-aligned measurements and inputs; `u[k]` is held over `[t_k, t_{k+1})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub y: Vec<[f64; 4]>,
    pub u: Vec<[f64; 2]>,
    pub ts: f64,
    pub label: DatasetLabel,
}

impl Dataset {
    pub fn new(y: Vec<[f64; 4]>, u: Vec<[f64; 2]>, ts: f64, label: DatasetLabel) -> Result<Self> {
        if y.len() != u.len() {
            return Err(Error::InvalidInput(format!(
                "measurement and input records differ in length ({} vs {})",
                y.len(),
                u.len()
            )));
        }
        if !(ts.is_finite() && ts > 0.0) {
            return Err(Error::InvalidInput(format!("sample time must be positive, got {ts}")));
        }
        if y.iter().flatten().chain(u.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("dataset contains non-finite values".into()));
        }
        Ok(Self { y, u, ts, label })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Uses the `y` and `u` columns of a simulator log; the sample time is
    /// taken from the time column.
    pub fn from_log(log: &TrajectoryLog, label: DatasetLabel) -> Result<Self> {
        if log.len() < 2 {
            return Err(Error::InvalidInput("a dataset needs at least two samples".into()));
        }
        let ts = log.t[1] - log.t[0];
        Self::new(log.y.clone(), log.u.clone(), ts, label)
    }

    pub fn from_csv(path: impl AsRef<Path>, label: DatasetLabel) -> Result<Self> {
        let log = TrajectoryLog::read_csv(std::fs::File::open(path)?)?;
        Self::from_log(&log, label)
    }

    /// Consecutive sub-record `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidInput(format!("slice {start}..{end} is out of range for {} samples", self.len())));
        }
        Self::new(self.y[start..end].to_vec(), self.u[start..end].to_vec(), self.ts, self.label)
    }
}

/// Number of entries in the parameter vector θ.
pub const THETA_LEN: usize = 22;

/// Names of θ's entries, in order.
pub const THETA_NAMES: [&str; THETA_LEN] = [
    "a1", "a2", "a3", "a4", "A1", "A2", "A3", "A4", "gamma1", "gamma2", "sigma1", "sigma2", "sigma3", "sigma4",
    "sigma_d1", "sigma_d2", "sigma_d3", "sigma_d4", "r2_1", "r2_2", "r2_3", "r2_4",
];

pub mod theta_index {
    pub const A: usize = 0;
    pub const AREA: usize = 4;
    pub const GAMMA: usize = 8;
    pub const SIGMA: usize = 10;
    pub const SIGMA_D: usize = 14;
    pub const R2: usize = 18;
}

/// Model and noise parameters as one flat vector. Density and gravity are
/// not estimated and ride along unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub model: ModelParams,
    pub noise: NoiseParams,
}

impl Theta {
    pub fn to_vec(&self) -> [f64; THETA_LEN] {
        let mut v = [0.0; THETA_LEN];
        v[0..4].copy_from_slice(&self.model.a);
        v[4..8].copy_from_slice(&self.model.area);
        v[8..10].copy_from_slice(&self.model.gamma);
        v[10..14].copy_from_slice(&self.noise.sigma);
        v[14..18].copy_from_slice(&self.noise.sigma_d);
        v[18..22].copy_from_slice(&self.noise.r2);
        v
    }

    pub fn with_values(&self, v: &[f64; THETA_LEN]) -> Self {
        let take4 = |i: usize| [v[i], v[i + 1], v[i + 2], v[i + 3]];
        Self {
            model: ModelParams {
                a: take4(0),
                area: take4(4),
                gamma: [v[8], v[9]],
                ..self.model.clone()
            },
            noise: NoiseParams {
                sigma: take4(10),
                sigma_d: take4(14),
                r2: take4(18),
            },
        }
    }
}

/// Which entries of θ are free, their bounds, and the optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationSpec {
    pub free: [bool; THETA_LEN],
    pub lower: [f64; THETA_LEN],
    pub upper: [f64; THETA_LEN],
    /// Optimize `ln θ_i` instead of `θ_i`.
    pub log_scale: [bool; THETA_LEN],
    /// Carry the integrating disturbance states in the filter.
    pub augmented: bool,
    pub max_iter: usize,
    /// Relative spread of simplex values at which a run stops.
    pub tol: f64,
    /// Fresh simplices built around the incumbent after a run stops.
    pub restarts: usize,
    /// Relative size of the initial simplex in the transformed coordinates.
    pub initial_step: f64,
    pub prior: InitialBeliefConfig,
}

impl EstimationSpec {
    fn base() -> Self {
        let mut lower = [1e-6; THETA_LEN];
        let mut upper = [1e6; THETA_LEN];
        for i in 0..2 {
            lower[theta_index::GAMMA + i] = 1e-3;
            upper[theta_index::GAMMA + i] = 1.0 - 1e-3;
        }
        for i in 0..4 {
            lower[theta_index::A + i] = 0.05;
            upper[theta_index::A + i] = 10.0;
            lower[theta_index::AREA + i] = 10.0;
            upper[theta_index::AREA + i] = 5000.0;
        }
        Self {
            free: [false; THETA_LEN],
            lower,
            upper,
            log_scale: [true; THETA_LEN],
            augmented: false,
            max_iter: 4000,
            tol: 1e-10,
            restarts: 2,
            initial_step: 0.1,
            prior: InitialBeliefConfig::default(),
        }
    }

    /// Drift parameters `a`, `A`, `γ` with disturbances absent and the noise
    /// model held fixed.
    pub fn drift_stage() -> Self {
        let mut s = Self::base();
        for i in 0..theta_index::SIGMA {
            s.free[i] = true;
        }
        s
    }

    /// State diffusion and measurement-noise variances with the drift fixed.
    pub fn noise_stage() -> Self {
        let mut s = Self::base();
        for i in 0..4 {
            s.free[theta_index::SIGMA + i] = true;
            s.free[theta_index::R2 + i] = true;
        }
        s
    }

    pub fn validate(&self, theta0: &[f64; THETA_LEN]) -> Result<()> {
        for i in 0..THETA_LEN {
            if !(self.lower[i] <= self.upper[i]) {
                return Err(Error::Config(format!("bounds of {} are inverted", THETA_NAMES[i])));
            }
            if self.free[i] && self.log_scale[i] && self.lower[i] <= 0.0 {
                return Err(Error::Config(format!("log-scaled {} needs a positive lower bound", THETA_NAMES[i])));
            }
            if self.free[i] && !(self.lower[i] <= theta0[i] && theta0[i] <= self.upper[i]) {
                return Err(Error::Config(format!(
                    "initial {} = {} lies outside [{}, {}]",
                    THETA_NAMES[i], theta0[i], self.lower[i], self.upper[i]
                )));
            }
        }
        if !self.free.iter().any(|f| *f) {
            return Err(Error::Config("no free parameters".into()));
        }
        Ok(())
    }
}

/// Initial mass estimate from the first measurement, `x = ρ A y`.
fn initial_state(data: &Dataset, p: &ModelParams) -> Vector4<f64> {
    Vector4::from_fn(|i, _| data.y[0][i].max(0.0) * p.rho * p.area[i])
}

fn nll_with<const N: usize>(theta: &Theta, data: &Dataset, prior: &InitialBeliefConfig) -> f64 {
    if data.is_empty() || theta.model.validate().is_err() || theta.noise.validate().is_err() {
        return f64::INFINITY;
    }
    let Ok(plant) = QuadTank::new(theta.model.clone()) else {
        return f64::INFINITY;
    };
    let c = plant.measurement_matrix();
    let model = AugmentedModel::new(plant, c, &theta.noise);
    let init = GaussianBelief::<N>::initial(&initial_state(data, &theta.model), prior);
    let mut sum = 0.0;
    let res = for_each_innovation(&data.y, &data.u, &model, &init, data.ts, |_, upd| {
        sum += upd.ln_det + upd.mahalanobis;
    });
    if res.is_err() || !sum.is_finite() {
        return f64::INFINITY;
    }
    0.5 * sum + 0.5 * (data.len() * 4) as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// `V = ½ Σ_k (ln det R_e,k + e_k' R_e,k⁻¹ e_k) + (N n_y / 2) ln 2π` from the
/// extended filter's innovations, `+∞` if the filter breaks down.
/// `augmented` selects the 8-state filter with integrating disturbances.
pub fn negative_log_likelihood(theta: &Theta, data: &Dataset, augmented: bool, prior: &InitialBeliefConfig) -> f64 {
    if augmented {
        nll_with::<8>(theta, data, prior)
    } else {
        nll_with::<4>(theta, data, prior)
    }
}

/// Result of a Nelder–Mead minimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    /// Best value after each iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Nelder–Mead with standard coefficients (reflection 1, expansion 2,
/// contraction ½, shrink ½). After a run stops, up to `restarts` fresh
/// simplices are built around the incumbent; the search ends early when a
/// restart fails to improve it.
pub fn nelder_mead(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    max_iter: usize,
    tol: f64,
    restarts: usize,
) -> Minimum {
    let n = x0.len();
    let mut evaluations = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut best_x = x0.to_vec();
    let mut best = eval(x0, &mut evaluations);
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    for round in 0..=restarts {
        let round_start = best;
        let mut simplex: Vec<(Vec<f64>, f64)> = vec![(best_x.clone(), best)];
        for i in 0..n {
            let mut x = best_x.clone();
            x[i] += if x[i] == 0.0 { step } else { step * x[i].abs().max(1.0) };
            let v = eval(&x, &mut evaluations);
            simplex.push((x, v));
        }
        converged = false;
        while iterations < max_iter {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let (lo, hi) = (simplex[0].1, simplex[n].1);
            if lo < best {
                best = lo;
                best_x = simplex[0].0.clone();
            }
            trace.push(best);
            if (hi - lo).abs() <= tol * (lo.abs() + tol) && hi.is_finite() {
                converged = true;
                break;
            }
            iterations += 1;
            let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|p| p.0[j]).sum::<f64>() / n as f64).collect();
            let along = |t: f64| -> Vec<f64> {
                centroid.iter().zip(&simplex[n].0).map(|(c, w)| c + t * (w - c)).collect()
            };
            let xr = along(-1.0);
            let fr = eval(&xr, &mut evaluations);
            if fr < simplex[0].1 {
                let xe = along(-2.0);
                let fe = eval(&xe, &mut evaluations);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
            } else {
                let (xc, fc) = if fr < simplex[n].1 {
                    let xc = along(-0.5);
                    let fc = eval(&xc, &mut evaluations);
                    (xc, fc)
                } else {
                    let xc = along(0.5);
                    let fc = eval(&xc, &mut evaluations);
                    (xc, fc)
                };
                if fc < simplex[n].1.min(fr) {
                    simplex[n] = (xc, fc);
                } else {
                    let x0 = simplex[0].0.clone();
                    for p in simplex.iter_mut().skip(1) {
                        p.0 = x0.iter().zip(&p.0).map(|(a, b)| a + 0.5 * (b - a)).collect();
                        p.1 = eval(&p.0, &mut evaluations);
                    }
                }
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if simplex[0].1 < best {
            best = simplex[0].1;
            best_x = simplex[0].0.clone();
        }
        if !(best < round_start - tol * (round_start.abs() + tol)) && round > 0 {
            break;
        }
        if iterations >= max_iter {
            break;
        }
    }
    Minimum {
        x: best_x,
        value: best,
        trace,
        iterations,
        evaluations,
        converged,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub theta: Theta,
    pub nll: f64,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Minimizes the negative log-likelihood over the free entries of θ,
/// starting from `theta0`. Points outside the bounds score `+∞`.
pub fn estimate_parameters(data: &Dataset, theta0: &Theta, spec: &EstimationSpec) -> Result<Estimate> {
    let v0 = theta0.to_vec();
    spec.validate(&v0)?;
    if data.len() < 2 {
        return Err(Error::InvalidInput("estimation needs at least two samples".into()));
    }
    let free: Vec<usize> = (0..THETA_LEN).filter(|&i| spec.free[i]).collect();
    let to_z = |i: usize, v: f64| if spec.log_scale[i] { v.ln() } else { v };
    let from_z = |i: usize, z: f64| if spec.log_scale[i] { z.exp() } else { z };
    let unpack = |z: &[f64]| -> Option<[f64; THETA_LEN]> {
        let mut v = v0;
        for (k, &i) in free.iter().enumerate() {
            let x = from_z(i, z[k]);
            if !(spec.lower[i] <= x && x <= spec.upper[i]) {
                return None;
            }
            v[i] = x;
        }
        Some(v)
    };
    let mut objective = |z: &[f64]| match unpack(z) {
        Some(v) => negative_log_likelihood(&theta0.with_values(&v), data, spec.augmented, &spec.prior),
        None => f64::INFINITY,
    };
    let z0: Vec<f64> = free.iter().map(|&i| to_z(i, v0[i])).collect();
    let min = nelder_mead(&mut objective, &z0, spec.initial_step, spec.max_iter, spec.tol, spec.restarts);
    let v = unpack(&min.x).unwrap_or(v0);
    Ok(Estimate {
        theta: theta0.with_values(&v),
        nll: min.value,
        trace: min.trace,
        iterations: min.iterations,
        evaluations: min.evaluations,
        converged: min.converged,
    })
}

/// Per-channel fit `100 (1 − ‖y_i − ỹ_i‖ / ‖y_i − mean(y_i)‖)` with 2-norms
/// over time.
pub fn fit_per_channel(y: &[[f64; 4]], y_sim: &[[f64; 4]]) -> Result<[f64; 4]> {
    if y.len() != y_sim.len() || y.is_empty() {
        return Err(Error::InvalidInput(format!(
            "fit needs equal, non-empty records ({} vs {})",
            y.len(),
            y_sim.len()
        )));
    }
    let n = y.len() as f64;
    let mut out = [0.0; 4];
    for (i, o) in out.iter_mut().enumerate() {
        let mean = y.iter().map(|r| r[i]).sum::<f64>() / n;
        let den = y.iter().map(|r| (r[i] - mean).powi(2)).sum::<f64>().sqrt();
        if den == 0.0 {
            return Err(Error::ConstantChannel(i));
        }
        let num = y.iter().zip(y_sim).map(|(a, b)| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt();
        *o = 100.0 * (1.0 - num / den);
    }
    Ok(out)
}

/// Channel-averaged fit percentage.
pub fn goodness_of_fit(y: &[[f64; 4]], y_sim: &[[f64; 4]]) -> Result<f64> {
    Ok(fit_per_channel(y, y_sim)?.iter().sum::<f64>() / 4.0)
}

/// Noise-free levels of the model driven by the dataset's inputs, started
/// from the first measurement.
pub fn simulate_levels(data: &Dataset, params: &ModelParams) -> Result<Vec<[f64; 4]>> {
    let plant = QuadTank::new(params.clone())?;
    let x0 = initial_state(data, params);
    Ok(simulate_deterministic(&plant, &x0, &data.u, data.ts, 10))
}

/// Minimum samples per steady segment.
pub const MIN_SEGMENT_LEN: usize = 10;

/// Inflation applied to the upper-tank variances so the filters trust the
/// lower-tank sensors more.
pub const UPPER_TANK_INFLATION: f64 = 1000.0;

/// Pooled per-channel sample variance over steady segments (each segment
/// around its own mean), with channels 3 and 4 multiplied by 1000.
pub fn estimate_noise_covariance(segments: &[Dataset]) -> Result<[f64; 4]> {
    if segments.is_empty() {
        return Err(Error::InvalidInput("no steady segments given".into()));
    }
    let mut ss = [0.0; 4];
    let mut dof = 0usize;
    for (index, seg) in segments.iter().enumerate() {
        if seg.len() < MIN_SEGMENT_LEN {
            return Err(Error::SegmentTooShort {
                index,
                len: seg.len(),
                min: MIN_SEGMENT_LEN,
            });
        }
        let n = seg.len() as f64;
        for (i, s) in ss.iter_mut().enumerate() {
            let mean = seg.y.iter().map(|r| r[i]).sum::<f64>() / n;
            *s += seg.y.iter().map(|r| (r[i] - mean).powi(2)).sum::<f64>();
        }
        dof += seg.len() - 1;
    }
    let mut r2 = ss.map(|s| s / dof as f64);
    r2[2] *= UPPER_TANK_INFLATION;
    r2[3] *= UPPER_TANK_INFLATION;
    Ok(r2)
}

/// Piecewise-constant excitation: segments of random length alternately move
/// pump 1, pump 2, or both to random levels within `[lo, hi]`.
pub fn step_rich_input(n: usize, lo: f64, hi: f64, min_hold: usize, max_hold: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = NormalRng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut u = [0.5 * (lo + hi); 2];
    let mut which = 0usize;
    while out.len() < n {
        let hold = min_hold + (rng.uniform() * (max_hold - min_hold + 1) as f64) as usize;
        let mut level = || lo + (hi - lo) * rng.uniform();
        match which % 3 {
            0 => u[0] = level(),
            1 => u[1] = level(),
            _ => u = [level(), level()],
        }
        which += 1;
        for _ in 0..hold.max(1) {
            if out.len() == n {
                break;
            }
            out.push(u);
        }
    }
    out
}

/// Open-loop record of the stochastic plant under `inputs`, sampled every
/// `ts` with `substeps` Euler–Maruyama steps in between.
pub fn generate_dataset(
    params: &ModelParams,
    noise: &NoiseParams,
    x0: &Vector4<f64>,
    inputs: &[[f64; 2]],
    ts: f64,
    substeps: usize,
    seed: u64,
) -> Result<Dataset> {
    let plant = QuadTank::new(params.clone())?;
    noise.validate()?;
    let mut rng = NormalRng::seed_from_u64(seed);
    let dt = ts / substeps.max(1) as f64;
    let mut x = *x0;
    let mut y = Vec::with_capacity(inputs.len());
    for u in inputs {
        y.push(measure(&x, &plant, noise, &mut rng).into());
        let u = Vector2::from(*u);
        for _ in 0..substeps.max(1) {
            x = sde_step(&x, &u, &Vector4::zeros(), &plant, noise, dt, &mut rng);
        }
    }
    Dataset::new(y, inputs.to_vec(), ts, DatasetLabel::Estimation)
}

/// Summary of a known-truth recovery run.
pub fn relative_errors(estimate: &[f64], truth: &[f64]) -> Vec<f64> {
    estimate.iter().zip(truth).map(|(e, t)| ((e - t) / t).abs()).collect()
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
