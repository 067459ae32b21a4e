use thiserror::Error;

/// Errors raised across the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid probability weights: {0}")]
    InvalidWeights(String),

    #[error("value {0} lies outside the unit interval [0, 1)")]
    OutsideUnitInterval(f64),

    #[error("invalid coordinate set {coords:?} for a product of rank {rank}")]
    InvalidCoordinates { coords: Vec<usize>, rank: usize },

    #[error("kernel row undefined at atom {0}, which carries positive base mass")]
    UndefinedKernelRow(usize),

    #[error("quadrature did not converge within {nodes} nodes (last change {last_change:e})")]
    QuadratureNonConvergence { nodes: usize, last_change: f64 },

    #[error("empty product")]
    EmptyProduct,

    #[error("dense tensor of {0} entries exceeds the 10^6 limit")]
    TooLarge(usize),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("operation requires a drift-of-intentions model")]
    NotDriftModel,

    #[error("lifted state space exceeded its cap of {0} states")]
    StateExplosion(usize),

    #[error("successor lifted state is not in the enumerated space")]
    OffSpaceSuccessor,

    #[error("profile is not admissible: player {player}, state {state}, residual {residual:e}")]
    NotAdmissible { player: usize, state: usize, residual: f64 },

    #[error("kernel backend mismatch: {0}")]
    BackendMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Config(e.to_string())
    }
}
