//! Runs scenarios over controllers and seeds and writes the results.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, mean_std, Metrics};
use super::scenario::{ControllerKind, ScenarioSpec};
use crate::controllers::{Controller, DecentralizedPid, Lmpc, Nmpc};
use crate::error::Result;
use crate::model::{linearize, QuadTank};
use crate::simulator::{simulate_closed_loop, ClosedLoopPlan, SimConfig, TrajectoryLog};

pub fn build_controller(kind: ControllerKind, spec: &ScenarioSpec) -> Result<Box<dyn Controller>> {
    let op = spec.operating_point()?;
    let lm = linearize(&spec.params, &op)?;
    let mpc = spec.mpc.clone();
    Ok(match kind {
        ControllerKind::Pid => Box::new(DecentralizedPid::tuned(
            &lm,
            spec.pid.tc,
            spec.pid.n_filter,
            mpc.ts,
            mpc.u_min,
            mpc.u_max,
        )?),
        ControllerKind::Lmpc => Box::new(Lmpc::new(lm, &spec.filter_noise, mpc, spec.prior)?),
        ControllerKind::Nmpc => {
            let plant = QuadTank::new(spec.params.clone())?;
            let (c, cz) = (plant.measurement_matrix(), plant.output_matrix());
            Box::new(Nmpc::new(plant, c, cz, &spec.filter_noise, mpc, spec.prior, op.x_s, op.u_s)?)
        }
    })
}

pub fn closed_loop_plan(spec: &ScenarioSpec) -> Result<ClosedLoopPlan> {
    let op = spec.operating_point()?;
    Ok(ClosedLoopPlan {
        plant: QuadTank::new(spec.params.clone())?,
        noise: spec.plant_noise.clone(),
        x0: op.x_s,
        setpoints: spec.setpoints.clone(),
        disturbance: spec.disturbance.clone(),
        duration: spec.duration,
        anticipatory: spec.anticipatory,
        u_min: spec.mpc.u_min,
        u_max: spec.mpc.u_max,
    })
}

/// One closed-loop run of one controller on one seed.
pub fn run_single(spec: &ScenarioSpec, kind: ControllerKind, seed: u64) -> Result<TrajectoryLog> {
    spec.validate()?;
    let plan = closed_loop_plan(spec)?;
    let mut controller = build_controller(kind, spec)?;
    let cfg = SimConfig {
        ts: spec.mpc.ts,
        substeps: spec.substeps,
        seed,
    };
    simulate_closed_loop(&plan, controller.as_mut(), &cfg)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub controller: ControllerKind,
    pub seed: u64,
    pub metrics: Metrics,
    /// Steps at which the optimizer failed and the previous input was held.
    pub fallbacks: usize,
    /// Mean optimizer iterations per step (0 for PID).
    pub mean_iterations: f64,
    #[serde(skip)]
    pub log: TrajectoryLog,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControllerSummary {
    pub nise: Stat,
    pub niae: Stat,
    pub nisdu: Stat,
    pub seeds: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub scenario: String,
    pub runs: Vec<RunRecord>,
    pub aggregate: BTreeMap<ControllerKind, ControllerSummary>,
}

impl ExperimentResult {
    pub fn summary(&self, kind: ControllerKind) -> Option<&ControllerSummary> {
        self.aggregate.get(&kind)
    }

    pub fn runs_of(&self, kind: ControllerKind) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(move |r| r.controller == kind)
    }
}

fn record(kind: ControllerKind, seed: u64, log: TrajectoryLog) -> Result<RunRecord> {
    let metrics = compute_metrics(&log)?;
    let stats: Vec<_> = log.solver.iter().flatten().collect();
    let fallbacks = stats.iter().filter(|s| s.fallback).count();
    let mean_iterations = if stats.is_empty() {
        0.0
    } else {
        stats.iter().map(|s| s.iterations as f64).sum::<f64>() / stats.len() as f64
    };
    Ok(RunRecord {
        controller: kind,
        seed,
        metrics,
        fallbacks,
        mean_iterations,
        log,
    })
}

pub fn aggregate(runs: &[RunRecord]) -> BTreeMap<ControllerKind, ControllerSummary> {
    let mut out = BTreeMap::new();
    for kind in ControllerKind::ALL {
        let ms: Vec<Metrics> = runs.iter().filter(|r| r.controller == kind).map(|r| r.metrics).collect();
        if ms.is_empty() {
            continue;
        }
        let stat = |f: fn(&Metrics) -> f64| {
            let (mean, std) = mean_std(&ms.iter().map(f).collect::<Vec<_>>());
            Stat { mean, std }
        };
        out.insert(
            kind,
            ControllerSummary {
                nise: stat(|m| m.nise),
                niae: stat(|m| m.niae),
                nisdu: stat(|m| m.nisdu),
                seeds: ms.len(),
            },
        );
    }
    out
}

/// Runs every selected controller on every seed. All controllers see the same
/// noise realization for a given seed.
pub fn run_experiment(spec: &ScenarioSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let mut runs = Vec::new();
    for &seed in &spec.seeds {
        for &kind in &spec.controllers {
            let log = run_single(spec, kind, seed)?;
            runs.push(record(kind, seed, log)?);
        }
    }
    let aggregate = aggregate(&runs);
    Ok(ExperimentResult {
        scenario: spec.name.clone(),
        runs,
        aggregate,
    })
}

pub fn run_csv_name(scenario: &str, kind: ControllerKind, seed: u64) -> String {
    format!("{scenario}_{kind}_seed{seed}.csv")
}

/// Writes one CSV per run and `metrics.json`; returns the paths written.
pub fn write_outputs(result: &ExperimentResult, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for run in &result.runs {
        let path = dir.join(run_csv_name(&result.scenario, run.controller, run.seed));
        run.log.write_csv(fs::File::create(&path)?)?;
        written.push(path);
    }
    let path = dir.join("metrics.json");
    fs::write(&path, serde_json::to_string_pretty(result)?)?;
    written.push(path);
    Ok(written)
}
