//! Error types shared across the crate.

use crate::krylov::SolveReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// The periodic embedding removed more spectral mass than allowed.
    #[error("clipped spectral mass {mass:.3e} exceeds tolerance {tol:.3e}; the torus does not resolve the covariance")]
    ClippedSpectrum { mass: f64, tol: f64 },

    /// A coefficient cell violates the boundedness or coercivity checks.
    #[error("coefficient field inadmissible at cell {cell}: {detail}")]
    Admissibility { cell: usize, detail: String },

    /// Two fields were combined over different grids.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// Krylov iteration exhausted its budget; the report carries the state.
    #[error("no convergence after {} iterations (residual {:.3e})", report.iterations, report.residual)]
    NoConvergence { report: SolveReport },

    /// Constant-coefficient solve with a non-positive symmetric part.
    #[error("matrix symmetric part is not positive definite")]
    SingularMatrix,

    /// Test-function support too small for the grid resolution.
    #[error("resolution: {0}")]
    Resolution(String),

    /// A centered functional was requested without a centering field.
    #[error("missing centering: {0}")]
    MissingCentering(String),

    /// Moment estimation needs a minimum ensemble size.
    #[error("insufficient samples: got {got}, need at least {need}")]
    InsufficientSamples { got: usize, need: usize },

    /// Log-log fit on nonpositive statistics.
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    /// Report rendering without a scaling report present.
    #[error("missing report: {0}")]
    MissingReport(String),

    /// Configuration or flag validation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// Exit-code classification: 1 for validation problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_)
            | Error::Io(_)
            | Error::Format(_)
            | Error::MissingReport(_)
            | Error::GridMismatch(_)
            | Error::Resolution(_)
            | Error::MissingCentering(_)
            | Error::InsufficientSamples { .. } => 1,
            Error::ClippedSpectrum { .. }
            | Error::Admissibility { .. }
            | Error::NoConvergence { .. }
            | Error::SingularMatrix
            | Error::DegenerateFit(_) => 2,
        }
    }

    /// Machine-readable form written next to failed runs.
    pub fn to_json(&self) -> String {
        format!(
            "{{\"error\":{{\"kind\":\"{}\",\"message\":{}}}}}",
            self.kind(),
            serde_json::to_string(&self.to_string()).unwrap_or_else(|_| "\"\"".into())
        )
    }

    fn kind(&self) -> &'static str {
        match self {
            Error::ClippedSpectrum { .. } => "clipped-spectrum",
            Error::Admissibility { .. } => "admissibility",
            Error::GridMismatch(_) => "grid-mismatch",
            Error::NoConvergence { .. } => "no-convergence",
            Error::SingularMatrix => "singular-matrix",
            Error::Resolution(_) => "resolution",
            Error::MissingCentering(_) => "missing-centering",
            Error::InsufficientSamples { .. } => "insufficient-samples",
            Error::DegenerateFit(_) => "degenerate-fit",
            Error::MissingReport(_) => "missing-report",
            Error::InvalidConfig(_) => "invalid-config",
            Error::Io(_) => "io",
            Error::Format(_) => "format",
        }
    }
}
