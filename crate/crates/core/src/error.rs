use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unstable crystal: mode {mode} has squared frequency {omega_sq:e} rad^2/s^2")]
    Unstable { mode: usize, omega_sq: f64 },

    #[error("no trap stiffness gives a stable spectrum with highest mode at {target:e} rad/s: {reason}")]
    Calibration { target: f64, reason: String },

    #[error("singular denominator for mode {mode}: cooling rate and detuning both vanish")]
    SingularMode { mode: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("system too large for dense treatment: {n} spins (cap {cap})")]
    TooLarge { n: usize, cap: usize },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("steady state is not unique: null space has dimension {0}")]
    DegenerateSteadyState(usize),

    #[error("{aborted} of {total} trajectories diverged")]
    Divergence { aborted: usize, total: usize },

    #[error("initial state is not permutation symmetric: {0}")]
    NotSymmetricState(String),

    #[error("fit window holds {0} samples, need at least 10")]
    FitWindow(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
