use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("degenerate norm: sampled convexity bound {a:.3e} is below the floor {floor:.3e}")]
    DegenerateNorm { a: f64, floor: f64 },

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("focal singularity: 1 - kappa*k = {0:.3e}")]
    FocalSingularity(f64),

    #[error("resolution too coarse: unit ball spans {cells} cells, need at least {needed}")]
    ResolutionTooCoarse { cells: usize, needed: usize },

    #[error("geometry too thin: {0}")]
    GeometryTooThin(String),

    #[error("separation violation between populations {i} and {j}: distance {distance:.4} < {required:.4}")]
    SeparationViolation {
        i: usize,
        j: usize,
        distance: f64,
        required: f64,
    },

    #[error("negative boundary data for population {population} at cell ({ix}, {iy})")]
    NegativeData {
        population: usize,
        ix: usize,
        iy: usize,
    },

    #[error("boundary data of population {0} has empty support")]
    EmptySupport(usize),

    #[error("linear solver diverged after {iterations} iterations (residual {residual:.3e})")]
    SolverDiverged { iterations: usize, residual: f64 },

    #[error("negative screening coefficient {value:.3e} at cell {cell}")]
    NegativeCoefficient { cell: usize, value: f64 },

    #[error("fixed point not converged after {iterations} iterations (residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("degenerate contour: {vertices} vertices")]
    DegenerateContour { vertices: usize },

    #[error("zero cone angle")]
    ZeroAngle,

    #[error("curvature {kappa:.3} too close to the focal value 1")]
    CurvatureNearFocal { kappa: f64 },

    #[error("patch too small: {cells} cells")]
    PatchTooSmall { cells: usize },

    #[error("probe outside decay region: {0}")]
    ProbeOutsideDecayRegion(String),

    #[error("no root: {0}")]
    NoRoot(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
