use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("no studies")]
    NoStudies,
    #[error("heterogeneity undefined: need at least 2 studies, got {0}")]
    HeterogeneityUndefined(usize),
    #[error("insufficient studies for prediction interval: need at least 3, got {0}")]
    InsufficientStudiesForPrediction(usize),
    #[error("nonpositive SE: {0}")]
    NonPositiveSe(f64),
    #[error("degenerate allele frequency: {0}")]
    DegenerateAlleleFrequency(f64),
    #[error("{name} out of range: {value}")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("weight mode requires sample size but study {index} has none")]
    MissingSampleSize { index: usize },
    #[error("study {0} not found")]
    StudyNotFound(alloc::string::String),
    #[error("estimate not selected at stated threshold: |z| = {z} < {threshold}")]
    NotSelected { z: f64, threshold: f64 },
    #[error("target power {target} unreachable")]
    UnreachablePower { target: f64 },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid record: {0}")]
    InvalidRecord(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn check_range(name: &'static str, value: f64, ok: bool) -> Result<()> {
    if ok && !value.is_nan() {
        Ok(())
    } else {
        Err(Error::OutOfRange { name, value })
    }
}
