use thiserror::Error;

/// Broad failure class, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Infeasible,
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown catalog field `{0}` (expected one of zero, constant, rotation, linear, shear, swirl_power)")]
    UnknownField(String),
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("trajectory left the safety ball of radius {radius} at time {time}")]
    Escape { time: f64, radius: f64 },
    #[error("CFL number {cfl:.4} exceeds the limit {limit}")]
    Cfl { cfl: f64, limit: f64 },
    #[error("no threshold meets the Lusin budget {epsilon} (smallest excluded measure {best})")]
    LusinInfeasible { epsilon: f64, best: f64 },
    #[error("test-function support {support} is not covered by the data box {data}")]
    Coverage { support: String, data: String },
    #[error("density {value} below the compressibility floor {floor}")]
    DensityBound { value: f64, floor: f64 },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_)
            | Error::UnknownField(_)
            | Error::TimeOutOfRange { .. }
            | Error::Coverage { .. }
            | Error::Degenerate(_)
            | Error::Csv(_)
            | Error::Io(_) => ErrorClass::Config,
            Error::Escape { .. } | Error::Cfl { .. } | Error::LusinInfeasible { .. } => {
                ErrorClass::Infeasible
            }
            Error::DensityBound { .. } | Error::Internal(_) => ErrorClass::Internal,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
