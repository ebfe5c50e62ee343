use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {key}: {msg}")]
    Config { key: String, msg: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid cross-fit plan: {0}")]
    InvalidPlan(String),

    #[error("matrix decomposition failed: {0}")]
    Decomposition(String),

    #[error("probability flow blew up at t = {time:.6}")]
    FlowBlowup { time: f64 },

    #[error("kernel covariance is singular: min eigenvalue {min_eig:e} below floor {floor:e}")]
    SingularMoments { min_eig: f64, floor: f64 },

    #[error("need at least two distinct scales to fit a slope (got {0})")]
    InsufficientScales(usize),

    #[error("not enough neighbours: arm has {available} units, k_nn = {requested}")]
    NotEnoughNeighbors { available: usize, requested: usize },

    #[error("training fold {fold} contains a single treatment arm")]
    DegenerateFold { fold: usize },

    #[error("normal equations are singular; use ridge > 0 ({0})")]
    Singular(String),

    #[error("components were built for a different {0}")]
    Wiring(String),

    #[error("arm {0} has no units")]
    EmptyArm(i64),

    #[error("reference pool overlaps the working sample ({0} shared units)")]
    Contamination(usize),

    #[error("variance at point {point} is {sigma:e}, below floor {floor:e}")]
    DegenerateVariance { point: usize, sigma: f64, floor: f64 },

    #[error("influence values at point {point} are not centred (mean {mean:e})")]
    NotCentered { point: usize, mean: f64 },

    #[error("log-domain error: {0}")]
    LogDomain(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("population oracle unavailable: {0}")]
    OracleUnavailable(String),

    #[error("matched-target violation: {0}")]
    MatchedTarget(String),

    #[error("export too large: {scalars} scalars exceeds the {limit} guard")]
    TooLarge { scalars: usize, limit: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by user-supplied configuration rather than runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Json(_))
    }
}
