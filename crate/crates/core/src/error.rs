use thiserror::Error;

/// Errors produced by the cell toolkit.
#[derive(Debug, Error)]
pub enum GlError {
    #[error("b out of range: expected 0 < b < 1, got {0}")]
    BOutOfRange(f64),
    #[error("vortex count must be at least 1")]
    NoVortices,
    #[error("resolution too small: n = {0}, need n >= 16")]
    ResolutionTooSmall(usize),
    #[error("grid too coarse: h = {h:.6} exceeds sqrt(b)/8 = {limit:.6} (need n >= {min_n})")]
    GridTooCoarse { h: f64, limit: f64, min_n: usize },
    #[error("side length violates flux quantization: R^2 / 2pi = {0} is not an integer")]
    Quantization(f64),
    #[error("field contains non-finite values at site {0}")]
    NonFinite(usize),
    #[error("field shape mismatch: expected {expected} samples, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("degree undefined: loop touches a zero of the field at site ({0}, {1})")]
    DegreeUndefined(i64, i64),
    #[error("trial requires square N, got N = {0}")]
    NotSquare(usize),
    #[error("grid does not tile into cells: n = {n} is not divisible by {cells} cells per side")]
    CellTiling { n: usize, cells: usize },
    #[error("cell resolution too small: {0} samples per cell side, need at least 16")]
    CellResolution(usize),
    #[error("base point {0:?} touches a pole plaquette")]
    BaseOnPole((usize, usize)),
    #[error("divergence: energy increased from {before} to {after} at iteration {iteration}")]
    Divergence {
        before: f64,
        after: f64,
        iteration: usize,
    },
    #[error("all minimization runs failed")]
    AllRunsFailed,
    #[error("empty test-function dictionary")]
    EmptyDictionary,
    #[error("missing sweep point at b = {0}")]
    MissingSweepPoint(f64),
    #[error("r0 undefined: b |log b| = 0 at b = {0}")]
    R0Undefined(f64),
    #[error("tile quantization violated: b l^2 / (2 pi eps^2) = {0} is not an integer")]
    TileQuantization(f64),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error("payload length mismatch: expected {expected} bytes, got {got}")]
    PayloadLength { expected: usize, got: usize },
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GlError>;
