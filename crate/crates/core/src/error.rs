use thiserror::Error;

/// Errors raised across design construction, evaluation and search.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("matrix is singular over GF(2)")]
    Singular,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("parse error at position {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("unit count {0} is not a power of two")]
    NonPowerOfTwo(usize),

    #[error("block structure is not an orthogonal block structure: {0}")]
    NotOrthogonal(String),

    #[error("incomparable strata {0} and {1} tie and no tiebreak was supplied")]
    AmbiguousOrder(String, String),

    #[error("infeasible design-key configuration: {0}")]
    Infeasible(String),

    #[error("no design-key template for this block structure: {0}")]
    UnsupportedStructure(String),

    #[error("unknown stratum or pool label `{0}`")]
    UnknownLabel(String),

    #[error("pool `{0}` is empty")]
    EmptyPool(String),

    #[error("no valid generator set after {0} resamples")]
    ExhaustedRetries(usize),

    #[error("design key is singular")]
    SingularKey,

    #[error("stratum variances are infeasible: {0}")]
    InfeasibleXi(String),

    #[error("subset is not admissible: {0}")]
    NotAdmissible(String),

    #[error("criterion vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),

    #[error("invalid substitution counts: {0}")]
    InvalidQ(String),

    #[error("constraints exclude every candidate run")]
    EmptyCandidateSet,

    #[error("search space has {0} candidates, above the cap of {1}")]
    SpaceTooLarge(u128, u128),

    #[error("too many factors for exhaustive evaluation: {0} (limit {1})")]
    TooManyFactors(usize, usize),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
