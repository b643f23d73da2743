//! Simulation studies, closed-loop runs and performance metrics.

pub mod experiment;
pub mod metrics;
pub mod scenario;

pub use experiment::{
    aggregate, build_controller, closed_loop_plan, run_csv_name, run_experiment, run_single, write_outputs, ControllerSummary,
    ExperimentResult, RunRecord, Stat,
};
pub use metrics::{compute_metrics, mean_std, Metrics};
pub use scenario::{
    build_scenario, load_scenario_file, parse_scenario_toml, scenario_to_toml, ControllerKind, PidConfig, ScenarioSpec, SCENARIO_NAMES,
};
