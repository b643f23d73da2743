use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The drift Jacobian has an unbounded entry when a tank is empty.
    #[error("drift Jacobian is singular: tank {tank} height {height} cm is at or below the tolerance")]
    SingularJacobian { tank: usize, height: f64 },

    #[error("steady state requires a negative level in tank {tank} (net inflow {inflow} cm3/s)")]
    InfeasibleSteadyState { tank: usize, inflow: f64 },

    #[error("system matrix is not Hurwitz (eigenvalue with real part {0})")]
    NotHurwitz(f64),

    #[error("innovation covariance is not positive definite at sample {0}")]
    SingularInnovation(usize),

    #[error("filter produced a non-finite state at sample {0}")]
    FilterDiverged(usize),

    #[error("controller returned a non-finite input at sample {0}")]
    NonFiniteInput(usize),

    #[error("quadratic program is malformed: {0}")]
    MalformedQp(String),

    #[error("channel {0} is constant; the fit ratio is undefined")]
    ConstantChannel(usize),

    #[error("segment {index} has {len} samples, at least {min} are required")]
    SegmentTooShort { index: usize, len: usize, min: usize },

    #[error("unknown scenario '{0}' (expected sim1, sim2, sim3 or sim4)")]
    UnknownScenario(String),

    #[error("unknown preset '{0}'")]
    UnknownPreset(String),

    #[error("unknown controller '{0}' (expected pid, lmpc or nmpc)")]
    UnknownController(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::InvalidInput(_) => "invalid_input",
            Error::SingularJacobian { .. } => "singular_jacobian",
            Error::InfeasibleSteadyState { .. } => "infeasible_steady_state",
            Error::NotHurwitz(_) => "not_hurwitz",
            Error::SingularInnovation(_) => "singular_innovation",
            Error::FilterDiverged(_) => "filter_diverged",
            Error::NonFiniteInput(_) => "non_finite_input",
            Error::MalformedQp(_) => "malformed_qp",
            Error::ConstantChannel(_) => "constant_channel",
            Error::SegmentTooShort { .. } => "segment_too_short",
            Error::UnknownScenario(_) => "unknown_scenario",
            Error::UnknownPreset(_) => "unknown_preset",
            Error::UnknownController(_) => "unknown_controller",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
