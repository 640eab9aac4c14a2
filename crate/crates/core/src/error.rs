//! Error types shared across the crate.

use crate::mesh::BoundaryTag;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("facet {0} is not a boundary facet")]
    InteriorFacet(usize),

    #[error("mesh has no cells")]
    EmptyMesh,

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("degenerate cell {0} (zero diameter or volume)")]
    DegenerateCell(usize),

    #[error("boundary tag {0:?} matches no facet")]
    EmptyTag(BoundaryTag),

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:.3e}, tolerance {tolerance:.3e})")]
    LinearNonConvergence {
        iterations: usize,
        residual: f64,
        tolerance: f64,
    },

    #[error("matrix is singular (zero pivot at row {0})")]
    SingularMatrix(usize),

    #[error("Newton iteration diverged at iteration {iteration} (residual grew to {residual:.3e} after {backtracks} backtracks)")]
    NewtonDiverged {
        iteration: usize,
        residual: f64,
        backtracks: usize,
    },

    #[error(
        "Newton iteration reached max iterations {max_iter} (relative residual {residual:.3e})"
    )]
    NewtonMaxIter { max_iter: usize, residual: f64 },

    #[error("fixed-point lag loop did not converge after {0} iterations")]
    LagNonConvergence(usize),

    #[error("packing surface area is zero: no facets tagged Packing or PackingJacket")]
    ZeroPackingArea,

    #[error("net outlet flux is zero; flow-averaged outlet concentration undefined")]
    ZeroOutletFlux,

    #[error("outlet concentration {c_out} outside the physical interval ({lo}, {hi}]")]
    UnphysicalOutletConcentration { c_out: f64, lo: f64, hi: f64 },

    #[error(
        "shape gradient extension system is singular: no fixed boundary constrains the deformation"
    )]
    UnconstrainedExtension,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("invalid case geometry: {0}")]
    InvalidGeometry(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
