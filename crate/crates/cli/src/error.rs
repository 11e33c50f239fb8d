//! Exit-code classification: validation problems exit 1, numerical failures 2.

use std::fmt;

use geonew::data::DataError;
use geonew::geofeat::GeofeatError;
use geonew::model::ModelError;
use geonew::solver::SolverError;
use geonew::train::TrainError;

/// Context marker for failures of the numerics rather than of the inputs.
#[derive(Debug)]
pub struct Numerical;

impl fmt::Display for Numerical {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("numerical failure")
    }
}

pub trait Classify {
    fn is_numerical(&self) -> bool;
}

impl Classify for SolverError {
    fn is_numerical(&self) -> bool {
        !matches!(self, SolverError::Config(_) | SolverError::Dimension { .. })
    }
}

impl Classify for ModelError {
    fn is_numerical(&self) -> bool {
        match self {
            ModelError::Solver(e) => e.is_numerical(),
            ModelError::Flux(_) | ModelError::Autodiff(_) | ModelError::Reduced(_) => true,
            _ => false,
        }
    }
}

impl Classify for DataError {
    fn is_numerical(&self) -> bool {
        matches!(self, DataError::Residual { .. } | DataError::Linalg(_) | DataError::Geofeat(_))
    }
}

impl Classify for GeofeatError {
    fn is_numerical(&self) -> bool {
        matches!(self, GeofeatError::Linalg(_))
    }
}

impl Classify for TrainError {
    fn is_numerical(&self) -> bool {
        match self {
            TrainError::Model(e) => e.is_numerical(),
            TrainError::Solver(e) => e.is_numerical(),
            TrainError::Data(e) => e.is_numerical(),
            _ => false,
        }
    }
}

pub trait NumericalExt<T> {
    /// Converts to `anyhow`, tagging numerical failures.
    fn classify(self) -> anyhow::Result<T>;
}

impl<T, E> NumericalExt<T> for Result<T, E>
where
    E: Classify + std::error::Error + Send + Sync + 'static,
{
    fn classify(self) -> anyhow::Result<T> {
        self.map_err(|e| {
            if e.is_numerical() {
                anyhow::Error::new(e).context(Numerical)
            } else {
                anyhow::Error::new(e)
            }
        })
    }
}

pub fn numerical(message: String) -> anyhow::Error {
    anyhow::anyhow!(message).context(Numerical)
}
