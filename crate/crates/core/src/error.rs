use thiserror::Error;

use crate::regularization::FisherState;

/// Errors raised by the library. Each variant maps to one failure class so the
/// command-line front end can translate it into a distinct exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("column `{column}` has {distinct} distinct values, fewer than the {requested} bins requested")]
    DegenerateBinning {
        column: String,
        distinct: usize,
        requested: usize,
    },

    #[error("unknown level `{label}` for lattice dimension `{dim}`")]
    UnknownLevel { dim: String, label: String },

    #[error("missing value for lattice feature `{dim}`")]
    MissingLatticeFeature { dim: String },

    #[error("infeasible lattice: {0}")]
    InfeasibleLattice(String),

    #[error("truncation order {order} exceeds the {d} lattice dimensions")]
    InvalidTruncation { order: usize, d: usize },

    #[error("model and lattice disagree: {0}")]
    ModelLatticeMismatch(String),

    #[error("invalid refinement: {0}")]
    InvalidRefinement(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionError { expected: usize, found: usize },

    #[error("response {value} is outside the support of the {family} family")]
    InvalidResponse { family: &'static str, value: f64 },

    #[error("numerical error: {0}")]
    NumericalError(String),

    #[error("Fisher weights did not settle after {iterations} outer iterations (last change {delta:.3e})")]
    NonConvergence {
        iterations: usize,
        delta: f64,
        state: Box<FisherState>,
    },

    #[error("optimizer diverged at step {step}")]
    Diverged { step: usize },

    #[error("dataset is empty")]
    EmptyData,

    #[error("posterior shape a_N = {0} must exceed 2")]
    InsufficientConcentration(f64),

    #[error("decay rate {rho} must lie in [0, L) with L = {levels}")]
    IllDefinedFlow { rho: f64, levels: f64 },

    #[error("order-0 effect variance is zero; the decay rate is undefined")]
    UndefinedRho,

    #[error("ingest failed at row {row}, column `{column}`: {message}")]
    IngestError {
        row: usize,
        column: String,
        message: String,
    },

    #[error("artifact format version {found} is not supported by this reader (version {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("artifact is corrupt: {0}")]
    ChecksumError(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
