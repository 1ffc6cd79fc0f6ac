use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error)]
pub enum QgError {
    #[error("topology error: {0}")]
    Topology(String),

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("incompatible data: total circulation and total PV differ by {defect:.3e} (tolerance {tolerance:.3e})")]
    Compatibility { defect: f64, tolerance: f64 },

    #[error("linear solver failed: {message} (residual {residual:.3e})")]
    Solver { message: String, residual: f64 },

    #[error("test function is not admissible: {0}")]
    InvalidTestFunction(String),

    #[error("coincident source and target at {0:?}")]
    Singularity([f64; 3]),

    #[error("integration error: {0}")]
    Integration(String),

    #[error("Picard iteration failed to contract; distance ratios {ratios:?}")]
    Contraction { ratios: Vec<f64> },

    #[error("point ({0}, {1}) lies outside the cross-section")]
    OutOfDomain(f64, f64),

    #[error("flow maps have mismatched seed lattices: {0}")]
    Seed(String),

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<QgError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl QgError {
    pub(crate) fn at_step(step: usize, err: QgError) -> Self {
        QgError::Step {
            step,
            source: Box::new(err),
        }
    }
}

pub type Result<T> = std::result::Result<T, QgError>;
