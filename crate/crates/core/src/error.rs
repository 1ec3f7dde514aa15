use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("roll-off factor {0} outside [0, 1]")]
    InvalidRolloff(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("cyclic prefix of {cp_len} samples exceeds frame length {n}")]
    CpTooLong { cp_len: usize, n: usize },

    #[error("cyclic prefix of {cp_len} samples is shorter than channel span {span} minus one")]
    CpTooShort { cp_len: usize, span: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("modulation matrix is singular; zero-forcing receiver does not exist")]
    SingularModulation,

    #[error("inverse modulation matrix is not shift/modulation structured (max deviation {0:.3e})")]
    NonStationaryInverse(f64),

    #[error("closed-form value has imaginary residue {imag:.3e} against real part {real:.3e}")]
    ComplexResidue { real: f64, imag: f64 },

    #[error("variance evaluated to {value:.3e}, below the round-off floor")]
    NegativeVariance { value: f64 },

    #[error("interference matrix is not positive definite after maximum loading (smallest eigenvalue {min_eigenvalue:.3e})")]
    Indefinite { min_eigenvalue: f64 },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("at sweep point {point}: {source}")]
    AtSweepPoint {
        point: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by user configuration rather than numerics.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::Config { .. }
            | Error::InvalidGrid(_)
            | Error::InvalidRolloff(_)
            | Error::InvalidParameter(_)
            | Error::CpTooLong { .. }
            | Error::CpTooShort { .. }
            | Error::DimensionMismatch { .. }
            | Error::IndexOutOfRange(_) => true,
            Error::AtSweepPoint { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
