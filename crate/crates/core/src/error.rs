use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate density: grid has no mass and no floor")]
    DegenerateDensity,

    #[error("too many pyramid levels ({levels}) for a {width}x{height} grid")]
    TooManyLevels {
        levels: usize,
        width: usize,
        height: usize,
    },

    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("unequal total mass: {a} vs {b}")]
    UnequalMass { a: f64, b: f64 },

    #[error("density must be strictly positive (found {0} at some pixel)")]
    NonPositiveDensity(f64),

    #[error("solver diverged: {0}")]
    Diverged(String),

    #[error("non-invertible map: jacobian determinant {0} <= 0")]
    NonInvertible(f64),

    #[error("identical inputs; relative MSE undefined")]
    IdenticalInputs,

    #[error("reference mismatch between embeddings")]
    ReferenceMismatch,

    #[error("non-finite value produced: {0}")]
    NonFinite(String),

    #[error("constraints unsatisfiable after {0} attempts")]
    ConstraintsUnsatisfiable(usize),

    #[error("stratification violated: fold {fold} leaves class {class} out of training")]
    StratificationViolated { fold: usize, class: usize },

    #[error("within-class scatter is singular")]
    SingularScatter,

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
