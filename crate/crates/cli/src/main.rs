use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use quadtank::controllers::simc_tune;
use quadtank::harness::{
    build_scenario, compute_metrics, load_scenario_file, run_experiment, write_outputs, ControllerKind, ScenarioSpec,
};
use quadtank::model::{cross_coupling_tfs, linearize};
use quadtank::params::{load_params_file, params_to_toml};
use quadtank::simulator::TrajectoryLog;
use quadtank::sysid::{
    estimate_parameters, fit_per_channel, goodness_of_fit, simulate_levels, Dataset, DatasetLabel, EstimationSpec, Theta,
};
use quadtank::{Error, ModelParams, NoiseParams, OperatingPoint};

#[derive(Parser)]
#[command(name = "quadtank", version, about = "Quadruple-tank simulation, identification and control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One closed-loop run of one controller on one seed.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "pid")]
        controller: ControllerKind,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Maximum-likelihood parameter estimation from a trajectory CSV.
    Identify(IdentifyArgs),
    /// SIMC PID gains for both loops at an operating point.
    Tune {
        #[command(flatten)]
        params: ParamsArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [300.0, 300.0])]
        u_op: Vec<f64>,
        #[arg(long, default_value_t = 50.0)]
        tc: f64,
        #[arg(long, default_value_t = 5.0)]
        n_filter: f64,
    },
    /// A scenario over several controllers and seeds, with CSV and metrics.json output.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Defaults to the scenario's controller list.
        #[arg(long, value_delimiter = ',')]
        controllers: Option<Vec<ControllerKind>>,
        /// Defaults to the scenario's seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// NISE, NIAE and NISΔU of trajectory CSVs.
    Metrics {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long, default_value = "sim1")]
    scenario: String,
    /// TOML scenario file; overrides --scenario.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ScenarioArgs {
    fn load(&self) -> quadtank::Result<ScenarioSpec> {
        match &self.config {
            Some(path) => load_scenario_file(path),
            None => build_scenario(&self.scenario),
        }
    }
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long, default_value = "nominal")]
    params_preset: String,
    /// TOML parameter file; overrides --params-preset.
    #[arg(long)]
    params: Option<PathBuf>,
}

impl ParamsArgs {
    fn load(&self) -> quadtank::Result<(ModelParams, Option<NoiseParams>)> {
        match &self.params {
            Some(path) => load_params_file(path),
            None => Ok((ModelParams::preset(&self.params_preset)?, None)),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    /// a, A and γ with the noise model fixed.
    Drift,
    /// State diffusion and measurement variances with the drift fixed.
    Noise,
}

#[derive(Args)]
struct IdentifyArgs {
    #[arg(long)]
    data: PathBuf,
    /// Record for the goodness-of-fit report; defaults to the estimation data.
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "drift")]
    stage: Stage,
    #[command(flatten)]
    params: ParamsArgs,
    #[arg(long, default_value = "simulation")]
    noise_preset: String,
    /// Filter with integrating disturbance states.
    #[arg(long)]
    augmented: bool,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Write the estimate as a parameter TOML file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn simulate(scenario: &ScenarioArgs, controller: ControllerKind, seed: u64, out: &PathBuf) -> quadtank::Result<serde_json::Value> {
    let mut spec = scenario.load()?;
    spec.controllers = vec![controller];
    spec.seeds = vec![seed];
    let result = run_experiment(&spec)?;
    let files = write_outputs(&result, out)?;
    Ok(json!({ "metrics": result.runs[0].metrics, "files": files }))
}

fn run(
    scenario: &ScenarioArgs,
    controllers: &Option<Vec<ControllerKind>>,
    seeds: &Option<Vec<u64>>,
    out: &PathBuf,
) -> quadtank::Result<serde_json::Value> {
    let mut spec = scenario.load()?;
    if let Some(c) = controllers {
        spec.controllers = c.clone();
    }
    if let Some(s) = seeds {
        spec.seeds = s.clone();
    }
    let result = run_experiment(&spec)?;
    let files = write_outputs(&result, out)?;
    Ok(json!({ "scenario": result.scenario, "aggregate": result.aggregate, "files": files }))
}

fn tune(params: &ParamsArgs, u_op: &[f64], tc: f64, n_filter: f64) -> quadtank::Result<serde_json::Value> {
    let (p, _) = params.load()?;
    let [u1, u2] = u_op else {
        return Err(Error::InvalidInput(format!("--u-op needs two values, got {}", u_op.len())));
    };
    let op = OperatingPoint::from_inputs(nalgebra::Vector2::new(*u1, *u2), nalgebra::Vector4::zeros(), &p)?;
    let lm = linearize(&p, &op)?;
    let (g12, g21) = cross_coupling_tfs(&lm)?;
    Ok(json!({
        "operating_point": { "u": op.u_s.as_slice(), "z": op.z_s.as_slice() },
        "loops": [
            { "pairing": "y1 -> u2", "tf": g12, "gains": simc_tune(&g12, tc, n_filter)? },
            { "pairing": "y2 -> u1", "tf": g21, "gains": simc_tune(&g21, tc, n_filter)? },
        ],
    }))
}

fn identify(args: &IdentifyArgs) -> quadtank::Result<serde_json::Value> {
    let data = Dataset::from_csv(&args.data, DatasetLabel::Estimation)?;
    let (model, noise) = args.params.load()?;
    let noise = match noise {
        Some(n) => n,
        None => NoiseParams::preset(&args.noise_preset)?,
    };
    let mut spec = match args.stage {
        Stage::Drift => EstimationSpec::drift_stage(),
        Stage::Noise => EstimationSpec::noise_stage(),
    };
    spec.augmented = args.augmented;
    if let Some(m) = args.max_iter {
        spec.max_iter = m;
    }
    let est = estimate_parameters(&data, &Theta { model, noise }, &spec)?;
    let validation = match &args.validation {
        Some(path) => Dataset::from_csv(path, DatasetLabel::Validation)?,
        None => data,
    };
    let y_sim = simulate_levels(&validation, &est.theta.model)?;
    if let Some(path) = &args.out {
        std::fs::write(path, params_to_toml(&est.theta.model, Some(&est.theta.noise))?)?;
    }
    Ok(json!({
        "theta": est.theta,
        "nll": est.nll,
        "iterations": est.iterations,
        "evaluations": est.evaluations,
        "converged": est.converged,
        "fit": goodness_of_fit(&validation.y, &y_sim)?,
        "fit_per_channel": fit_per_channel(&validation.y, &y_sim)?,
    }))
}

fn metrics(paths: &[PathBuf]) -> quadtank::Result<serde_json::Value> {
    let mut out = Vec::new();
    for path in paths {
        let log = TrajectoryLog::read_csv(std::fs::File::open(path)?)?;
        out.push(json!({ "file": path, "metrics": compute_metrics(&log)? }));
    }
    Ok(json!(out))
}

fn error_json(kind: &str, message: &str) -> String {
    json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_json("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::Simulate { scenario, controller, seed, out } => simulate(scenario, *controller, *seed, out),
        Command::Identify(args) => identify(args),
        Command::Tune { params, u_op, tc, n_filter } => tune(params, u_op, *tc, *n_filter),
        Command::Run { scenario, controllers, seeds, out } => run(scenario, controllers, seeds, out),
        Command::Metrics { csv } => metrics(csv),
    };
    match result {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("JSON values serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
