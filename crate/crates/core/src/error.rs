use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("requires more flights: t = {t} exceeds covered time {covered}")]
    RequiresMoreFlights { t: f64, covered: f64 },
    #[error("quadrature did not converge: max Stein residual {max_residual:.3e} at w = {worst_probe:?}")]
    Quadrature { max_residual: f64, worst_probe: Vec<f64> },
    #[error("empty conditioning bins ({empty} of {bins}); widen bins, counts = {counts:?}")]
    EmptyBins {
        bins: usize,
        empty: usize,
        counts: Vec<usize>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
