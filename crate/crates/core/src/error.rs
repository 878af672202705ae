use thiserror::Error;

/// Diagnostics attached to a solver that failed to settle.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConvergenceDiagnostics {
    pub iterations: usize,
    pub last_values: Vec<f64>,
    pub residual: f64,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("convergence failure: {message} (iterations {}, residual {:.3e})", diagnostics.iterations, diagnostics.residual)]
    Convergence {
        message: String,
        diagnostics: ConvergenceDiagnostics,
    },

    #[error("invalid scene: {}", findings.join("; "))]
    Scene { findings: Vec<String> },

    #[error("ambiguous geometry: {0}")]
    Ambiguity(String),

    #[error("{message}; minimum grid {min_grid:?}")]
    Resolution { message: String, min_grid: [usize; 3] },

    #[error("quadrature budget exceeded: {message} (partial estimate {partial:?})")]
    Quadrature { message: String, partial: Vec<f64> },

    #[error("model error: {0}")]
    Model(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{term} term: {source}")]
    Term {
        term: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn convergence(message: impl Into<String>, diagnostics: ConvergenceDiagnostics) -> Self {
        Error::Convergence {
            message: message.into(),
            diagnostics,
        }
    }

    pub fn in_term(self, term: &'static str) -> Self {
        Error::Term {
            term,
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping term attribution wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Term { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} has non-finite entries")))
    }
}
