//! Errors tagged with the process exit code they map to.

use std::fmt;

use eikonal_twin::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Bad or missing configuration or input files (exit code 2).
    Config,
    /// A solver or invariant failed at run time (exit code 3).
    Numerical,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self.kind {
            Kind::Config => 2,
            Kind::Numerical => 3,
        }
    }

    pub fn context(self, msg: impl fmt::Display + Send + Sync + 'static) -> Self {
        Failure {
            kind: self.kind,
            error: self.error.context(msg),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub fn config_error(msg: impl fmt::Display) -> Failure {
    Failure {
        kind: Kind::Config,
        error: anyhow::anyhow!("{msg}"),
    }
}

pub fn numerical_error(msg: impl fmt::Display) -> Failure {
    Failure {
        kind: Kind::Numerical,
        error: anyhow::anyhow!("{msg}"),
    }
}

/// Input problems are configuration errors; everything the solvers raise
/// on valid input is numerical.
pub fn classify(e: &Error) -> Kind {
    match e {
        Error::InvalidInput(_)
        | Error::Parse { .. }
        | Error::Io { .. }
        | Error::UnknownSurface(_)
        | Error::EmptySurface(_)
        | Error::Mismatch(_) => Kind::Config,
        Error::Geometry(_)
        | Error::NonOrthonormalFrame { .. }
        | Error::NoPmjInside
        | Error::StaleTape
        | Error::CgNotConverged { .. }
        | Error::Singular(_) => Kind::Numerical,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            kind: classify(&e),
            error: e.into(),
        }
    }
}
