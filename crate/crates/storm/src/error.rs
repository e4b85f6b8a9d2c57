use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure classes; each maps to a process exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}

impl From<storm_core::Error> for Error {
    fn from(e: storm_core::Error) -> Self {
        use storm_core::Error as E;
        match e {
            E::InvalidConfig(_) | E::InvalidScene(_) => Error::Config(e.to_string()),
            E::NonUnitQuaternion { .. } | E::Parse { .. } | E::Io { .. } => Error::Data(e.to_string()),
        }
    }
}

impl From<storm_gridnet::Error> for Error {
    fn from(e: storm_gridnet::Error) -> Self {
        use storm_gridnet::Error as E;
        match e {
            E::Config(_) | E::Weights { .. } => Error::Config(e.to_string()),
            E::SequenceLength { .. } | E::Io { .. } => Error::Data(e.to_string()),
            E::Diverged { .. } | E::NonFinite(_) => Error::Numerical(e.to_string()),
            E::Core(c) => c.into(),
        }
    }
}
