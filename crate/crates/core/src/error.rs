use thiserror::Error;

/// One accepted or attempted step of the τ-continuation, kept in scalar-free form
/// so that it can travel inside [`Error`].
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct TraceStep {
    pub tau: f64,
    pub delta: f64,
    pub iterations: usize,
    pub distance: f64,
    pub c5_hat: f64,
    pub accepted: bool,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("kernel singular on the diagonal u = s = {0}; use the integrated kernel")]
    Singularity(f64),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invalid generator: {0}")]
    InvalidGenerator(String),
    #[error("invalid regime pair ({0}, {1}): pairs must have distinct states inside the state space")]
    InvalidPair(usize, usize),
    #[error("numerical conditioning: {0}")]
    Conditioning(String),
    #[error("coefficient `{name}` returned a non-finite value at t = {t}, regime = {regime}, x = {x:?}")]
    Coefficient {
        name: &'static str,
        t: f64,
        regime: usize,
        x: Vec<f64>,
    },
    #[error("inconsistent inputs: {0}")]
    Consistency(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contraction refused: {0}")]
    ContractionRefused(String),
    #[error("no convergence: {0}")]
    NonConvergence(String),
    #[error("fixed-point iteration diverging: {0}")]
    Divergence(String),
    #[error("continuation failed: {message}")]
    ContinuationFailed { message: String, trace: Vec<TraceStep> },
    #[error("inadmissible discount K = {k}: must be below {k_max}")]
    InadmissibleK { k: f64, k_max: f64 },
    #[error("assumption violated: {0}")]
    Assumption(String),
    #[error("singular control weight: {0}")]
    SingularWeight(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
