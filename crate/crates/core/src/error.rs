use thiserror::Error;

/// Errors produced while loading panel data or estimating a model.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unbalanced panel: unit `{unit}` has no observation at time {time}")]
    UnbalancedPanel { unit: String, time: f64 },
    #[error("duplicate observation for unit `{unit}` at time {time}")]
    DuplicateObservation { unit: String, time: f64 },
    #[error("non-numeric cell in column `{column}` on line {line}: `{value}`")]
    NonNumericCell {
        column: String,
        line: usize,
        value: String,
    },
    #[error("column `{0}` not found in input")]
    MissingColumn(String),
    #[error("variable `{var}` is missing for unit `{unit}` at time {time}")]
    MissingValue { var: String, unit: String, time: f64 },
    #[error("series too short: need at least {needed} periods, have {have}")]
    TooShort { needed: usize, have: usize },
    #[error("lag depth {lag} must be smaller than the number of periods {periods}")]
    LagTooDeep { lag: usize, periods: usize },
    #[error("variable `{0}` not found in panel")]
    UnknownVariable(String),
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("order condition violated: {l} instruments for {needed} parameters")]
    OrderConditionViolated { l: usize, needed: usize },
    #[error("collinear instruments in period {period}: rank {rank} < {cols} columns")]
    CollinearInstruments {
        period: usize,
        rank: usize,
        cols: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("weight matrix is singular beyond repair")]
    SingularWeight,
    #[error("threshold grid is empty")]
    EmptyGrid,
    #[error("criterion not finite at any grid point")]
    AllGridPointsSingular,
    #[error("degenerate sample: zero dispersion or fewer than two observations")]
    DegenerateSample,
    #[error("unstable autoregressive parameters: |beta1| and |beta1 + delta1| must be < 1")]
    UnstableParams,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
