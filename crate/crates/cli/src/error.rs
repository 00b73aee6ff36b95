use std::path::PathBuf;

use pare_core::extremes::ExtremesError;
use pare_core::geometry::GeometryError;
use pare_core::kriging::KrigingError;
use pare_core::pare::PareError;
use pare_core::regionalmax::RegionalMaxError;
use pare_core::simulation::SimulationError;
use thiserror::Error;

/// Process exit code for bad or insufficient input data.
pub const EXIT_DATA: i32 = 2;
/// Process exit code for optimizer failures.
pub const EXIT_CONVERGENCE: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("window {window}: region {region} has no usable station")]
    InsufficientData { window: String, region: String },
    #[error("{context}: {source}")]
    Extremes {
        context: String,
        #[source]
        source: ExtremesError,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("window {window}: {source}")]
    Pare {
        window: String,
        #[source]
        source: PareError,
    },
    #[error("window {window}: {source}")]
    Kriging {
        window: String,
        #[source]
        source: KrigingError,
    },
    #[error("window {window}: {source}")]
    RegionalMax {
        window: String,
        #[source]
        source: RegionalMaxError,
    },
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error("writing report: {0}")]
    Csv(#[from] csv::Error),
    #[error("writing report: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    /// True for optimizer failures; everything else is a data or usage error.
    pub fn is_convergence(&self) -> bool {
        match self {
            CliError::Extremes { source, .. } => matches!(source, ExtremesError::NonConvergence(_)),
            CliError::Pare { source, .. } => matches!(
                source,
                PareError::NonConvergence(_) | PareError::Extremes(ExtremesError::NonConvergence(_))
            ),
            CliError::Kriging { source, .. } => matches!(
                source,
                KrigingError::NonConvergence(_) | KrigingError::Extremes(ExtremesError::NonConvergence(_))
            ),
            CliError::RegionalMax {
                source: RegionalMaxError::Extremes { source, .. },
                ..
            } => matches!(source, ExtremesError::NonConvergence(_)),
            CliError::Simulation(SimulationError::AllIterationsFailed(_)) => true,
            _ => false,
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.is_convergence() {
            EXIT_CONVERGENCE
        } else {
            EXIT_DATA
        }
    }
}
