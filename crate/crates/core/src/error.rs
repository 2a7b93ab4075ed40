use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("row {row}: {message}")]
    InvalidRow { row: usize, message: String },

    #[error("input file contains no data rows")]
    EmptyInput,

    #[error("set `{set}` below minimum size (n = {size}, need at least 2)")]
    SetTooSmall { set: String, size: usize },

    #[error("set `{set}` has m = {treated} treated of n = {size}; need min(m, n - m) = 1")]
    UnsupportedDesign {
        set: String,
        treated: usize,
        size: usize,
    },

    #[error("missing `{0}` values required by this analysis")]
    MissingField(&'static str),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("design matrix is rank deficient; dependent columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),

    #[error("design matrix with I = {sets} rows and L = {columns} columns cannot have rank below I")]
    TooManyColumns { sets: usize, columns: usize },

    #[error("set {index} has leverage h = {leverage} too close to 1")]
    Leverage { index: usize, leverage: f64 },

    #[error("infeasible matching: {0}")]
    Infeasible(String),

    #[error("weak instrument: estimating-equation denominator is zero")]
    WeakInstrument,

    #[error("IRLS did not converge after {iterations} iterations (last deviance {deviance})")]
    NonConvergence { iterations: usize, deviance: f64 },

    #[error("problem size {size} exceeds the exhaustive-search guard of {limit}")]
    TooLarge { size: usize, limit: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("balance gate budget exhausted at replication {rep} after {attempts} attempts")]
    GateExhausted { rep: usize, attempts: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Errors caused by malformed or unsupported input, as opposed to
    /// numerical or feasibility failures on well-formed input.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::MissingColumn(_)
                | Error::InvalidRow { .. }
                | Error::EmptyInput
                | Error::SetTooSmall { .. }
                | Error::UnsupportedDesign { .. }
                | Error::MissingField(_)
                | Error::Domain(_)
                | Error::Config(_)
                | Error::Io(_)
                | Error::Csv(_)
        )
    }
}
