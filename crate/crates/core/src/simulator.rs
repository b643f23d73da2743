//! Ground-truth stochastic plant: Euler–Maruyama integration of the mass
//! balances, piecewise-constant disturbance profiles, noisy level sensors,
//! and the measure-then-actuate closed loop.

use std::io::{Read, Write};

use nalgebra::{SVector, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::controllers::{Controller, SetpointPreview, SolverStats};
use crate::error::{Error, Result};
use crate::model::{DriftModel, QuadTank};
use crate::params::NoiseParams;
use crate::rng::NormalRng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Controller sample time [s].
    pub ts: f64,
    /// Euler–Maruyama steps per sample.
    pub substeps: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            ts: 5.0,
            substeps: 10,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ts.is_finite() && self.ts > 0.0) {
            return Err(Error::InvalidInput(format!("sample time must be positive, got {}", self.ts)));
        }
        if self.substeps == 0 {
            return Err(Error::InvalidInput("substeps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Right-continuous piecewise-constant signal given by `(time, value)`
/// breakpoints; the first breakpoint sits at t = 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Breakpoint>", into = "Vec<Breakpoint>")]
pub struct Schedule<const N: usize> {
    breakpoints: Vec<(f64, [f64; N])>,
}

/// Serialized form of one schedule breakpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Breakpoint {
    pub t: f64,
    pub value: Vec<f64>,
}

impl<const N: usize> TryFrom<Vec<Breakpoint>> for Schedule<N> {
    type Error = Error;

    fn try_from(raw: Vec<Breakpoint>) -> Result<Self> {
        let bps = raw
            .into_iter()
            .map(|b| {
                let len = b.value.len();
                <[f64; N]>::try_from(b.value)
                    .map(|v| (b.t, v))
                    .map_err(|_| Error::InvalidInput(format!("breakpoint at t = {} has {len} values, expected {N}", b.t)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bps)
    }
}

impl<const N: usize> From<Schedule<N>> for Vec<Breakpoint> {
    fn from(s: Schedule<N>) -> Self {
        s.breakpoints
            .into_iter()
            .map(|(t, v)| Breakpoint { t, value: v.to_vec() })
            .collect()
    }
}

pub type DisturbanceProfile = Schedule<4>;
pub type SetpointSchedule = Schedule<2>;

impl<const N: usize> Schedule<N> {
    pub fn new(breakpoints: Vec<(f64, [f64; N])>) -> Result<Self> {
        match breakpoints.first() {
            Some((t, _)) if *t == 0.0 => {}
            _ => return Err(Error::InvalidInput("schedule must start with a breakpoint at t = 0".into())),
        }
        if breakpoints.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::InvalidInput("schedule times must be strictly increasing".into()));
        }
        if breakpoints.iter().any(|(t, v)| !t.is_finite() || v.iter().any(|x| !x.is_finite())) {
            return Err(Error::InvalidInput("schedule contains non-finite values".into()));
        }
        Ok(Self { breakpoints })
    }

    pub fn constant(value: [f64; N]) -> Self {
        Self {
            breakpoints: vec![(0.0, value)],
        }
    }

    pub fn breakpoints(&self) -> &[(f64, [f64; N])] {
        &self.breakpoints
    }

    pub fn at(&self, t: f64) -> SVector<f64, N> {
        // Index of the last breakpoint with time ≤ t; times before 0 use the first value.
        let idx = self.breakpoints.partition_point(|(bt, _)| *bt <= t).max(1) - 1;
        SVector::from(self.breakpoints[idx].1)
    }
}

impl DisturbanceProfile {
    pub fn zero() -> Self {
        Self::constant([0.0; 4])
    }
}

/// One Euler–Maruyama step with the result clamped at empty tanks.
pub fn sde_step(
    x: &Vector4<f64>,
    u: &Vector2<f64>,
    d: &Vector4<f64>,
    plant: &QuadTank,
    noise: &NoiseParams,
    dt: f64,
    rng: &mut NormalRng,
) -> Vector4<f64> {
    let xi: Vector4<f64> = rng.standard_normal_vector();
    let diffusion = Vector4::from(noise.sigma).component_mul(&xi) * dt.sqrt();
    (x + plant.drift(x, u, d) * dt + diffusion).map(|m| m.max(0.0))
}

/// Noisy level measurement `y = C x + v`, `v ~ N(0, diag(r2))`.
pub fn measure(x: &Vector4<f64>, plant: &QuadTank, noise: &NoiseParams, rng: &mut NormalRng) -> Vector4<f64> {
    let v: Vector4<f64> = rng.standard_normal_vector();
    plant.measurement(x) + Vector4::from(noise.r2).map(f64::sqrt).component_mul(&v)
}

/// Fixed-step RK4 integration of the deterministic mass balances over `dt`.
pub fn rk4_step<M: DriftModel>(
    model: &M,
    x: &Vector4<f64>,
    u: &Vector2<f64>,
    d: &Vector4<f64>,
    dt: f64,
    steps: usize,
) -> Vector4<f64> {
    let h = dt / steps as f64;
    let mut x = *x;
    for _ in 0..steps {
        let k1 = model.drift(&x, u, d);
        let k2 = model.drift(&(x + k1 * (h / 2.0)), u, d);
        let k3 = model.drift(&(x + k2 * (h / 2.0)), u, d);
        let k4 = model.drift(&(x + k3 * h), u, d);
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    x
}

/// Noise-free open-loop levels for a sampled input sequence (inputs held
/// over each sample), starting from `x0` at the first sample.
pub fn simulate_deterministic(
    plant: &QuadTank,
    x0: &Vector4<f64>,
    inputs: &[[f64; 2]],
    ts: f64,
    steps_per_sample: usize,
) -> Vec<[f64; 4]> {
    let mut x = *x0;
    let mut out = Vec::with_capacity(inputs.len());
    for u in inputs {
        out.push(plant.measurement(&x).into());
        x = rk4_step(plant, &x, &Vector2::from(*u), &Vector4::zeros(), ts, steps_per_sample);
    }
    out
}

/// Everything the closed loop needs besides the controller.
#[derive(Clone, Debug)]
pub struct ClosedLoopPlan {
    pub plant: QuadTank,
    pub noise: NoiseParams,
    pub x0: Vector4<f64>,
    pub setpoints: SetpointSchedule,
    pub disturbance: DisturbanceProfile,
    pub duration: f64,
    pub anticipatory: bool,
    pub u_min: Vector2<f64>,
    pub u_max: Vector2<f64>,
}

/// Recorded closed-loop trajectories, one entry per sample `t_k`. Row `k`
/// holds the measurement `y_k` and the input `u_k` computed from it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub t: Vec<f64>,
    pub y: Vec<[f64; 4]>,
    pub zbar: Vec<[f64; 2]>,
    pub u: Vec<[f64; 2]>,
    pub d: Vec<[f64; 4]>,
    pub x: Vec<[f64; 4]>,
    #[serde(default)]
    pub solver: Vec<Option<SolverStats>>,
}

pub const CSV_HEADER: [&str; 17] = [
    "t", "y1", "y2", "y3", "y4", "zbar1", "zbar2", "u1", "u2", "d1", "d2", "d3", "d4", "x1", "x2", "x3", "x4",
];

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn push(&mut self, t: f64, y: &Vector4<f64>, zbar: &Vector2<f64>, u: &Vector2<f64>, d: &Vector4<f64>, x: &Vector4<f64>) {
        self.t.push(t);
        self.y.push((*y).into());
        self.zbar.push((*zbar).into());
        self.u.push((*u).into());
        self.d.push((*d).into());
        self.x.push((*x).into());
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(CSV_HEADER)?;
        for k in 0..self.len() {
            let mut row = Vec::with_capacity(CSV_HEADER.len());
            row.push(self.t[k]);
            row.extend(self.y[k]);
            row.extend(self.zbar[k]);
            row.extend(self.u[k]);
            row.extend(self.d[k]);
            row.extend(self.x[k]);
            wtr.write_record(row.iter().map(|v| format!("{v:?}")))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header != CSV_HEADER {
            return Err(Error::InvalidInput(format!("unexpected CSV header {header:?}")));
        }
        let mut log = Self::default();
        for rec in rdr.records() {
            let rec = rec?;
            let v: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidInput(format!("bad CSV number: {e}")))?;
            let arr4 = |i: usize| [v[i], v[i + 1], v[i + 2], v[i + 3]];
            log.t.push(v[0]);
            log.y.push(arr4(1));
            log.zbar.push([v[5], v[6]]);
            log.u.push([v[7], v[8]]);
            log.d.push(arr4(9));
            log.x.push(arr4(13));
        }
        Ok(log)
    }
}

/// Runs the measure-then-actuate loop: at each `t_k` draw `y_k`, ask the
/// controller for `u_k`, clip it to the bounds, and hold it over
/// `[t_k, t_k + Ts)` through `substeps` Euler–Maruyama steps.
///
/// The random stream is consumed in the same order for every controller, so a
/// seed fixes the noise realization across controllers.
pub fn simulate_closed_loop(
    plan: &ClosedLoopPlan,
    controller: &mut dyn Controller,
    cfg: &SimConfig,
) -> Result<TrajectoryLog> {
    cfg.validate()?;
    let samples = (plan.duration / cfg.ts).round() as usize;
    let dt = cfg.ts / cfg.substeps as f64;
    let mut rng = NormalRng::seed_from_u64(cfg.seed);
    let mut log = TrajectoryLog::default();
    let mut x = plan.x0;
    controller.reset();
    for k in 0..samples {
        let t = k as f64 * cfg.ts;
        let y = measure(&x, &plan.plant, &plan.noise, &mut rng);
        let preview = SetpointPreview::new(&plan.setpoints, t, cfg.ts, plan.anticipatory);
        let u = controller.step(&y, &preview, t);
        if !u.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput(k));
        }
        let u = u.zip_zip_map(&plan.u_min, &plan.u_max, |v, lo, hi| v.clamp(lo, hi));
        log.push(t, &y, &preview.current(), &u, &plan.disturbance.at(t), &x);
        log.solver.push(controller.last_stats());
        for s in 0..cfg.substeps {
            let d = plan.disturbance.at(t + s as f64 * dt);
            x = sde_step(&x, &u, &d, &plan.plant, &plan.noise, dt, &mut rng);
        }
    }
    Ok(log)
}
