use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("unknown surface `{0}`")]
    UnknownSurface(String),

    #[error("surface `{0}` is empty")]
    EmptySurface(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("velocity frame of tet {tet} is not orthonormal (deviation {deviation:.3e})")]
    NonOrthonormalFrame { tet: usize, deviation: f64 },

    #[error("no PMJ lies inside the domain")]
    NoPmjInside,

    #[error("adjoint tape does not match the supplied PMJ set")]
    StaleTape,

    #[error("dimension mismatch: {0}")]
    Mismatch(String),

    #[error("conjugate gradient did not converge in {iterations} iterations (relative residual {residual:.3e})")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
