use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("dimension mismatch: {context} (expected {expected}, found {found})")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("integration failed at t = {last_valid_time}: {reason}")]
    IntegrationFailure { last_valid_time: f64, reason: String },

    #[error("basis dimension {dimension} exceeds cap {cap}")]
    Size { dimension: usize, cap: usize },

    #[error("Krylov propagation did not converge (residual {residual:e})")]
    KrylovNonConvergence { residual: f64 },

    #[error("estimators disagree: asymptote {asymptote}, integral {integral} (relative {relative:e})")]
    EstimatorDisagreement {
        asymptote: f64,
        integral: f64,
        relative: f64,
    },

    #[error("mesh under-resolved: need at least {required_cells} cells, cap is {cap}")]
    MeshResolution { required_cells: usize, cap: usize },

    #[error("truncation leakage {leakage:e} too large; use n_max >= {suggested_n_max}")]
    Truncation {
        leakage: f64,
        suggested_n_max: usize,
    },

    #[error("cutoff n_max = {n_max} too small for mean occupation {mean}; use n_max >= {suggested_n_max}")]
    Cutoff {
        n_max: usize,
        mean: f64,
        suggested_n_max: usize,
    },

    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("schema error: {}", .0.join("; "))]
    Schema(Vec<String>),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl LabError {
    pub(crate) fn dim(context: &'static str, expected: usize, found: usize) -> Self {
        LabError::Dimension {
            context,
            expected,
            found,
        }
    }
}
