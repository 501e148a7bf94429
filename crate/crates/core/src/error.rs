use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// A `(rows, cols)` pair used in shape diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape(pub usize, pub usize);

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0, self.1)
    }
}

/// A single broken slide invariant. Violations are data, so a validation pass
/// collects all of them instead of stopping at the first.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    CoordLength {
        grid: usize,
        phys: usize,
        flags: usize,
    },
    FeatureRows {
        expected: usize,
        found: usize,
    },
    TargetRows {
        expected: usize,
        found: usize,
    },
    TargetCols {
        expected: usize,
        found: usize,
    },
    GeneNames {
        expected: usize,
        found: usize,
    },
    OriginalAfterPseudo {
        index: usize,
    },
    NonIntegerOriginal {
        index: usize,
        row: f64,
        col: f64,
    },
    DuplicateGrid {
        first: usize,
        second: usize,
    },
    NonFinite {
        section: &'static str,
        row: usize,
        col: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::CoordLength { grid, phys, flags } => write!(
                f,
                "coordinate arrays disagree: {grid} grid, {phys} phys, {flags} flags"
            ),
            Violation::FeatureRows { expected, found } => {
                write!(f, "feature rows: expected {expected}, found {found}")
            }
            Violation::TargetRows { expected, found } => {
                write!(
                    f,
                    "target rows: expected {expected} originals, found {found}"
                )
            }
            Violation::TargetCols { expected, found } => {
                write!(
                    f,
                    "target columns: expected {expected} genes, found {found}"
                )
            }
            Violation::GeneNames { expected, found } => {
                write!(f, "gene names: expected {expected}, found {found}")
            }
            Violation::OriginalAfterPseudo { index } => {
                write!(f, "original spot {index} listed after a pseudo-spot")
            }
            Violation::NonIntegerOriginal { index, row, col } => write!(
                f,
                "original spot {index} has non-integer grid coordinate ({row}, {col})"
            ),
            Violation::DuplicateGrid { first, second } => {
                write!(f, "spots {first} and {second} share a grid coordinate")
            }
            Violation::NonFinite { section, row, col } => {
                write!(f, "non-finite value in {section} at ({row}, {col})")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("row {row} has no unmasked entries")]
    DegenerateRow { row: usize },

    #[error("non-finite objective when probing parameter {tensor}[{index}]")]
    Probe { tensor: usize, index: usize },

    #[error("tape: {0}")]
    TapeState(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("k = {k} exceeds the {available} available keys")]
    Capacity { k: usize, available: usize },

    #[error("affine fit is rank deficient: {0}")]
    RankDeficient(String),

    #[error("need at least 2 original spots, found {found}")]
    InsufficientSpots { found: usize },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("slide failed validation: {}", join_violations(.0))]
    Validation(Vec<Violation>),

    #[error("optimizer: non-finite gradient for parameter {0}")]
    Optimizer(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape {
            op,
            left: Shape(left.0, left.1),
            right: Shape(right.0, right.1),
        }
    }

    /// True for failures that stem from arithmetic (NaN, divergence, failed
    /// gradient checks) rather than from malformed input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_) | Error::Probe { .. } | Error::Optimizer(_)
        )
    }
}
