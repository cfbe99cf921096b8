use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    /// The information matrix failed the positive-definiteness check. At a
    /// point that was believed regular this means an undetected critical
    /// direction: the caller is attempting inference at a critical point
    /// whose critical vectors are not known.
    #[error(
        "singular information: pivot {pivot} at index {index} is below {threshold:e} \
         (possible undetected critical point)"
    )]
    SingularInformation {
        index: usize,
        pivot: f64,
        threshold: f64,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("rank-deficient design: {0}")]
    RankDeficientDesign(String),

    #[error("empty region: no scan point accepted at level {level}")]
    EmptyRegion { level: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-numeric cell at row {row}, column `{column}`: {value:?}")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("group `{0}` has no observations")]
    EmptyGroup(String),

    #[error("formula: {0}")]
    Formula(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("i/o: {0}")]
    Io(String),
}

impl Error {
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularInformation { .. } | Error::RankDeficientDesign(_) | Error::EmptyRegion { .. }
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}
