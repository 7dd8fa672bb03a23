use thiserror::Error;

use crate::field_solver::FieldSolution;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not Hermitian (relative deviation {0:.3e})")]
    NonHermitian(f64),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("electron Zeeman energy is zero; secular strength undefined")]
    ZeroField,

    /// Eigenvectors could not be matched to bare spin states.
    #[error("degenerate mixing: best overlap with bare state {state} is {overlap:.3} (< 0.5)")]
    DegenerateMixing { state: String, overlap: f64 },

    #[error("ambiguous field solution: best score {best:.4}, runner-up {runner_up:.4}")]
    Ambiguous {
        best: f64,
        runner_up: f64,
        solution: Box<FieldSolution>,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("rank-deficient fit: Jacobian condition number {0:.3e}")]
    RankDeficient(f64),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("no convergence: {0}")]
    NonConvergence(String),

    #[error("tones indistinguishable: slow {slow_khz:.3} kHz vs fast {fast_mhz:.4} MHz")]
    IndistinguishableTones { slow_khz: f64, fast_mhz: f64 },

    #[error("unknown transition `{0}`")]
    UnknownTransition(String),

    #[error("negative duration {0} us")]
    NegativeDuration(f64),

    #[error("found {found} peaks, {requested} requested")]
    TooFewPeaks { found: usize, requested: usize },

    #[error("density matrix invariant violated: {0}")]
    InvalidState(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
