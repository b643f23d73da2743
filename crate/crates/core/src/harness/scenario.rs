//! The four simulation studies and their TOML overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::controllers::MpcConfig;
use crate::error::{Error, Result};
use crate::estimators::InitialBeliefConfig;
use crate::model::OperatingPoint;
use crate::params::{ModelParams, NoiseParams};
use crate::simulator::{DisturbanceProfile, Schedule, SetpointSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Pid,
    Lmpc,
    Nmpc,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [ControllerKind::Pid, ControllerKind::Lmpc, ControllerKind::Nmpc];

    pub fn as_str(&self) -> &'static str {
        match self {
            ControllerKind::Pid => "pid",
            ControllerKind::Lmpc => "lmpc",
            ControllerKind::Nmpc => "nmpc",
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pid" => Ok(ControllerKind::Pid),
            "lmpc" => Ok(ControllerKind::Lmpc),
            "nmpc" => Ok(ControllerKind::Nmpc),
            _ => Err(Error::UnknownController(s.to_string())),
        }
    }
}

/// SIMC design parameters for the decentralized PID.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidConfig {
    /// Desired closed-loop time constant [s].
    pub tc: f64,
    pub n_filter: f64,
}

impl Default for PidConfig {
    fn default() -> Self {
        Self { tc: 50.0, n_filter: 5.0 }
    }
}

/// A complete closed-loop study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub params: ModelParams,
    pub plant_noise: NoiseParams,
    pub filter_noise: NoiseParams,
    /// Inputs defining the operating point used for linearization, PID bias
    /// and the initial plant state.
    pub u_op: [f64; 2],
    pub setpoints: SetpointSchedule,
    pub disturbance: DisturbanceProfile,
    pub duration: f64,
    pub anticipatory: bool,
    pub seeds: Vec<u64>,
    pub controllers: Vec<ControllerKind>,
    pub mpc: MpcConfig,
    pub pid: PidConfig,
    pub prior: InitialBeliefConfig,
    pub substeps: usize,
}

/// Setpoint offsets from the operating point's `z_s` for sim1/sim2: four
/// one-at-a-time steps per level, never more than 6 cm from `z_s` and never
/// more than 5 cm apart, so every target is reachable inside the input bounds.
pub const SIM1_STEPS: [(f64, [f64; 2]); 9] = [
    (0.0, [0.0, 0.0]),
    (500.0, [4.0, 0.0]),
    (1250.0, [4.0, 4.0]),
    (2000.0, [-1.0, 4.0]),
    (2750.0, [-1.0, -2.0]),
    (3500.0, [-5.0, -2.0]),
    (4250.0, [-5.0, -6.0]),
    (5000.0, [0.0, -6.0]),
    (5750.0, [0.0, 0.0]),
];

/// Default step size of the sim3 disturbances [cm³/s].
pub const SIM3_DISTURBANCE: f64 = 35.0;

pub const SCENARIO_NAMES: [&str; 4] = ["sim1", "sim2", "sim3", "sim4"];

impl ScenarioSpec {
    pub fn operating_point(&self) -> Result<OperatingPoint> {
        OperatingPoint::from_inputs(Vector2::from(self.u_op), Vector4::zeros(), &self.params)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.plant_noise.validate()?;
        self.filter_noise.validate()?;
        self.mpc.validate()?;
        if !(self.duration.is_finite() && self.duration >= 2.0 * self.mpc.ts) {
            return Err(Error::Config(format!("duration {} is shorter than two samples", self.duration)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.controllers.is_empty() {
            return Err(Error::Config("no controllers selected".into()));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be positive".into()));
        }
        let times = self.setpoints.breakpoints().iter().map(|b| b.0);
        if times.chain(self.disturbance.breakpoints().iter().map(|b| b.0)).any(|t| t > self.duration) {
            return Err(Error::Config("schedule breakpoints lie beyond the duration".into()));
        }
        self.operating_point()?;
        Ok(())
    }
}

/// Builds one of the four simulation studies with its defaults.
pub fn build_scenario(name: &str) -> Result<ScenarioSpec> {
    let params = ModelParams::nominal();
    let u_op = [300.0, 300.0];
    let op = OperatingPoint::from_inputs(Vector2::from(u_op), Vector4::zeros(), &params)?;
    let zs = op.z_s;
    let constant = SetpointSchedule::constant([zs[0], zs[1]]);
    let base = |name: &str| ScenarioSpec {
        name: name.to_string(),
        params: params.clone(),
        plant_noise: NoiseParams::simulation_default(),
        filter_noise: NoiseParams::simulation_default(),
        u_op,
        setpoints: constant.clone(),
        disturbance: DisturbanceProfile::zero(),
        duration: 4000.0,
        anticipatory: true,
        seeds: (1..=5).collect(),
        controllers: ControllerKind::ALL.to_vec(),
        mpc: MpcConfig::default(),
        pid: PidConfig::default(),
        prior: InitialBeliefConfig::default(),
        substeps: 10,
    };
    let tracking = || {
        Schedule::new(
            SIM1_STEPS
                .iter()
                .map(|(t, off)| (*t, [zs[0] + off[0], zs[1] + off[1]]))
                .collect(),
        )
    };
    match name {
        "sim1" => Ok(ScenarioSpec {
            setpoints: tracking()?,
            duration: 7000.0,
            ..base("sim1")
        }),
        "sim2" => Ok(ScenarioSpec {
            setpoints: tracking()?,
            duration: 7000.0,
            anticipatory: false,
            ..base("sim2")
        }),
        "sim3" => {
            let t = 4000.0;
            let disturbance = Schedule::new(vec![
                (0.0, [0.0; 4]),
                (t / 3.0, [0.0, 0.0, SIM3_DISTURBANCE, 0.0]),
                (2.0 * t / 3.0, [0.0, 0.0, SIM3_DISTURBANCE, SIM3_DISTURBANCE]),
            ])?;
            Ok(ScenarioSpec {
                disturbance,
                duration: t,
                ..base("sim3")
            })
        }
        "sim4" => Ok(ScenarioSpec {
            plant_noise: NoiseParams {
                sigma: [20.0; 4],
                sigma_d: [0.0; 4],
                r2: [0.02; 4],
            },
            filter_noise: NoiseParams {
                sigma: [0.0; 4],
                sigma_d: [20.0; 4],
                r2: [0.02; 4],
            },
            seeds: (1..=10).collect(),
            ..base("sim4")
        }),
        other => Err(Error::UnknownScenario(other.to_string())),
    }
}

/// Partial scenario file: `base` names a built-in study and every other key
/// overrides the corresponding field.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    base: Option<String>,
    name: Option<String>,
    params_preset: Option<String>,
    params: Option<ModelParams>,
    plant_noise: Option<NoiseParams>,
    filter_noise: Option<NoiseParams>,
    u_op: Option<[f64; 2]>,
    setpoints: Option<SetpointSchedule>,
    disturbance: Option<DisturbanceProfile>,
    duration: Option<f64>,
    anticipatory: Option<bool>,
    seeds: Option<Vec<u64>>,
    controllers: Option<Vec<ControllerKind>>,
    mpc: Option<MpcConfig>,
    pid: Option<PidConfig>,
    prior: Option<InitialBeliefConfig>,
    substeps: Option<usize>,
}

pub fn parse_scenario_toml(text: &str) -> Result<ScenarioSpec> {
    let f: ScenarioFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let mut s = build_scenario(f.base.as_deref().unwrap_or("sim1"))?;
    if let Some(v) = f.name {
        s.name = v;
    }
    if let Some(v) = f.params_preset {
        s.params = ModelParams::preset(&v)?;
    }
    macro_rules! over {
        ($($field:ident),*) => { $( if let Some(v) = f.$field { s.$field = v; } )* };
    }
    over!(params, plant_noise, filter_noise, u_op, setpoints, disturbance, duration, anticipatory, seeds, controllers, mpc, pid, prior, substeps);
    s.validate()?;
    Ok(s)
}

/// Fully explicit scenario file that [`parse_scenario_toml`] reads back.
pub fn scenario_to_toml(spec: &ScenarioSpec) -> Result<String> {
    toml::to_string(spec).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_scenario_file(path: impl AsRef<Path>) -> Result<ScenarioSpec> {
    parse_scenario_toml(&std::fs::read_to_string(path)?)
}
