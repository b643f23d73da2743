use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector2, Vector4};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use quadtank::harness::{self, ControllerKind, ExperimentResult, ScenarioSpec};
use quadtank::model::{self, cross_coupling_tfs, DriftModel};
use quadtank::simulator::TrajectoryLog;
use quadtank::solvers::{solve_box_qp, BoxQp, QpOptions};
use quadtank::sysid::{self, Dataset, DatasetLabel, EstimationSpec, Theta};

create_exception!(quadtank_py, QuadTankError, PyException);

fn py_err(e: quadtank::Error) -> PyErr {
    QuadTankError::new_err(format!("{}: {e}", e.kind()))
}

fn vec4(v: Vec<f64>, name: &str) -> PyResult<Vector4<f64>> {
    <[f64; 4]>::try_from(v)
        .map(Vector4::from)
        .map_err(|v| QuadTankError::new_err(format!("{name} needs 4 entries, got {}", v.len())))
}

fn vec2(v: Vec<f64>, name: &str) -> PyResult<Vector2<f64>> {
    <[f64; 2]>::try_from(v)
        .map(Vector2::from)
        .map_err(|v| QuadTankError::new_err(format!("{name} needs 2 entries, got {}", v.len())))
}

/// Model parameters: outlet areas `a`, cross sections `area`, valve splits `gamma`.
#[pyclass(name = "ModelParams", from_py_object)]
#[derive(Clone)]
struct PyModelParams {
    inner: quadtank::ModelParams,
}

#[pymethods]
impl PyModelParams {
    #[new]
    #[pyo3(signature = (preset = "nominal"))]
    fn new(preset: &str) -> PyResult<Self> {
        Ok(Self {
            inner: quadtank::ModelParams::preset(preset).map_err(py_err)?,
        })
    }

    #[getter]
    fn a(&self) -> Vec<f64> {
        self.inner.a.to_vec()
    }

    #[getter]
    fn area(&self) -> Vec<f64> {
        self.inner.area.to_vec()
    }

    #[getter]
    fn gamma(&self) -> Vec<f64> {
        self.inner.gamma.to_vec()
    }

    fn __repr__(&self) -> String {
        format!("ModelParams(a={:?}, area={:?}, gamma={:?})", self.inner.a, self.inner.area, self.inner.gamma)
    }
}

/// The nonlinear plant.
#[pyclass(name = "QuadTank")]
struct PyQuadTank {
    inner: quadtank::QuadTank,
}

#[pymethods]
impl PyQuadTank {
    #[new]
    #[pyo3(signature = (params = None))]
    fn new(params: Option<PyModelParams>) -> PyResult<Self> {
        let p = params.map(|p| p.inner).unwrap_or_default();
        Ok(Self {
            inner: quadtank::QuadTank::new(p).map_err(py_err)?,
        })
    }

    /// Mass balance `dx/dt` [g/s].
    #[pyo3(signature = (x, u, d = vec![0.0; 4]))]
    fn drift(&self, x: Vec<f64>, u: Vec<f64>, d: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.drift(&vec4(x, "x")?, &vec2(u, "u")?, &vec4(d, "d")?).as_slice().to_vec())
    }

    fn heights(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.heights(&vec4(x, "x")?).as_slice().to_vec())
    }

    /// Steady-state masses for constant inputs and disturbances.
    #[pyo3(signature = (u, d = vec![0.0; 4]))]
    fn steady_state(&self, u: Vec<f64>, d: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = model::steady_state(&vec2(u, "u")?, &vec4(d, "d")?, self.inner.params()).map_err(py_err)?;
        Ok(x.as_slice().to_vec())
    }

    /// `(A, B)` of the linearization at the steady state of `u`, row-major.
    fn linearize(&self, u: Vec<f64>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let op = quadtank::OperatingPoint::from_inputs(vec2(u, "u")?, Vector4::zeros(), self.inner.params()).map_err(py_err)?;
        let lm = model::linearize(self.inner.params(), &op).map_err(py_err)?;
        let rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        Ok((
            rows(&DMatrix::from_column_slice(4, 4, lm.a.as_slice())),
            rows(&DMatrix::from_column_slice(4, 2, lm.b.as_slice())),
        ))
    }

    /// SIMC gains `{kp, tau_i, tau_d}` for the loops `y1 → u2` and `y2 → u1`.
    #[pyo3(signature = (u, tc = 50.0, n_filter = 5.0))]
    fn simc_gains(&self, u: Vec<f64>, tc: f64, n_filter: f64) -> PyResult<Vec<BTreeMap<String, f64>>> {
        let op = quadtank::OperatingPoint::from_inputs(vec2(u, "u")?, Vector4::zeros(), self.inner.params()).map_err(py_err)?;
        let lm = model::linearize(self.inner.params(), &op).map_err(py_err)?;
        let (g12, g21) = cross_coupling_tfs(&lm).map_err(py_err)?;
        [g12, g21]
            .iter()
            .map(|tf| {
                let g = quadtank::controllers::simc_tune(tf, tc, n_filter).map_err(py_err)?;
                Ok(BTreeMap::from([
                    ("kp".to_string(), g.kp),
                    ("tau_i".to_string(), g.tau_i),
                    ("tau_d".to_string(), g.tau_d),
                ]))
            })
            .collect()
    }
}

/// A closed-loop study; start from `"sim1"` … `"sim4"` and adjust.
#[pyclass(name = "Scenario")]
struct PyScenario {
    inner: ScenarioSpec,
}

#[pymethods]
impl PyScenario {
    #[new]
    fn new(name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: harness::build_scenario(name).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: harness::parse_scenario_toml(text).map_err(py_err)?,
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }

    #[setter]
    fn set_seeds(&mut self, seeds: Vec<u64>) {
        self.inner.seeds = seeds;
    }

    #[getter]
    fn controllers(&self) -> Vec<String> {
        self.inner.controllers.iter().map(|c| c.to_string()).collect()
    }

    #[setter]
    fn set_controllers(&mut self, names: Vec<String>) -> PyResult<()> {
        self.inner.controllers = names
            .iter()
            .map(|n| n.parse::<ControllerKind>())
            .collect::<Result<_, _>>()
            .map_err(py_err)?;
        Ok(())
    }

    #[getter]
    fn duration(&self) -> f64 {
        self.inner.duration
    }

    #[setter]
    fn set_duration(&mut self, v: f64) {
        self.inner.duration = v;
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.mpc.horizon
    }

    #[setter]
    fn set_horizon(&mut self, n: usize) {
        self.inner.mpc.horizon = n;
    }

    fn run(&self, py: Python<'_>) -> PyResult<PyExperiment> {
        let spec = self.inner.clone();
        let result = py.detach(move || harness::run_experiment(&spec)).map_err(py_err)?;
        Ok(PyExperiment { inner: result })
    }

    fn to_toml(&self) -> PyResult<String> {
        harness::scenario_to_toml(&self.inner).map_err(py_err)
    }
}

/// Results of `Scenario.run()`.
#[pyclass(name = "Experiment")]
struct PyExperiment {
    inner: ExperimentResult,
}

#[pymethods]
impl PyExperiment {
    /// Per-run metrics as dicts with `controller`, `seed`, `nise`, `niae`, `nisdu`.
    fn runs(&self, py: Python<'_>) -> PyResult<Vec<Py<PyAny>>> {
        self.inner
            .runs
            .iter()
            .map(|r| {
                let d = pyo3::types::PyDict::new(py);
                d.set_item("controller", r.controller.to_string())?;
                d.set_item("seed", r.seed)?;
                d.set_item("nise", r.metrics.nise)?;
                d.set_item("niae", r.metrics.niae)?;
                d.set_item("nisdu", r.metrics.nisdu)?;
                Ok(d.into_any().unbind())
            })
            .collect()
    }

    /// Mean NISE, NIAE and NISΔU per controller.
    fn mean_metrics(&self) -> BTreeMap<String, BTreeMap<String, f64>> {
        self.inner
            .aggregate
            .iter()
            .map(|(k, s)| {
                (
                    k.to_string(),
                    BTreeMap::from([
                        ("nise".to_string(), s.nise.mean),
                        ("niae".to_string(), s.niae.mean),
                        ("nisdu".to_string(), s.nisdu.mean),
                    ]),
                )
            })
            .collect()
    }

    /// Writes the per-run CSVs and `metrics.json`; returns the paths.
    fn write(&self, dir: &str) -> PyResult<Vec<String>> {
        let paths = harness::write_outputs(&self.inner, dir).map_err(py_err)?;
        Ok(paths.iter().map(|p| p.to_string_lossy().into_owned()).collect())
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| QuadTankError::new_err(e.to_string()))
    }
}

/// `{nise, niae, nisdu}` of a trajectory CSV.
#[pyfunction]
fn metrics_from_csv(path: &str) -> PyResult<BTreeMap<String, f64>> {
    let file = std::fs::File::open(path).map_err(|e| py_err(e.into()))?;
    let log = TrajectoryLog::read_csv(file).map_err(py_err)?;
    let m = harness::compute_metrics(&log).map_err(py_err)?;
    Ok(BTreeMap::from([
        ("nise".to_string(), m.nise),
        ("niae".to_string(), m.niae),
        ("nisdu".to_string(), m.nisdu),
    ]))
}

/// Minimizes `½ x'Hx + g'x` over a box; returns `x`.
#[pyfunction]
fn box_qp(h: Vec<Vec<f64>>, g: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> PyResult<Vec<f64>> {
    let n = g.len();
    if h.len() != n || h.iter().any(|r| r.len() != n) {
        return Err(QuadTankError::new_err("H must be square and match g"));
    }
    let hm = DMatrix::from_fn(n, n, |i, j| h[i][j]);
    let (g, lower, upper) = (DVector::from_vec(g), DVector::from_vec(lower), DVector::from_vec(upper));
    let qp = BoxQp { h: &hm, g: &g, lower: &lower, upper: &upper };
    let sol = solve_box_qp(&qp, None, None, &QpOptions::default())
        .and_then(|s| s.into_result())
        .map_err(py_err)?;
    Ok(sol.x.as_slice().to_vec())
}

/// Fit percentage averaged over the four channels.
#[pyfunction]
fn goodness_of_fit(y: Vec<[f64; 4]>, y_sim: Vec<[f64; 4]>) -> PyResult<f64> {
    sysid::goodness_of_fit(&y, &y_sim).map_err(py_err)
}

/// Drift-stage ML estimate from a trajectory CSV, started at `params`.
/// Returns `{a, area, gamma, nll, fit}`.
#[pyfunction]
#[pyo3(signature = (path, params = None, max_iter = 4000))]
fn identify(py: Python<'_>, path: &str, params: Option<PyModelParams>, max_iter: usize) -> PyResult<BTreeMap<String, Vec<f64>>> {
    let data = Dataset::from_csv(path, DatasetLabel::Estimation).map_err(py_err)?;
    let theta0 = Theta {
        model: params.map(|p| p.inner).unwrap_or_default(),
        noise: quadtank::NoiseParams::simulation_default(),
    };
    let mut spec = EstimationSpec::drift_stage();
    spec.max_iter = max_iter;
    let est = py
        .detach(|| sysid::estimate_parameters(&data, &theta0, &spec))
        .map_err(py_err)?;
    let y_sim = sysid::simulate_levels(&data, &est.theta.model).map_err(py_err)?;
    let fit = sysid::goodness_of_fit(&data.y, &y_sim).map_err(py_err)?;
    Ok(BTreeMap::from([
        ("a".to_string(), est.theta.model.a.to_vec()),
        ("area".to_string(), est.theta.model.area.to_vec()),
        ("gamma".to_string(), est.theta.model.gamma.to_vec()),
        ("nll".to_string(), vec![est.nll]),
        ("fit".to_string(), vec![fit]),
    ]))
}

#[pymodule]
fn quadtank_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("QuadTankError", m.py().get_type::<QuadTankError>())?;
    m.add_class::<PyModelParams>()?;
    m.add_class::<PyQuadTank>()?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(metrics_from_csv, m)?)?;
    m.add_function(wrap_pyfunction!(box_qp, m)?)?;
    m.add_function(wrap_pyfunction!(goodness_of_fit, m)?)?;
    m.add_function(wrap_pyfunction!(identify, m)?)?;
    Ok(())
}
