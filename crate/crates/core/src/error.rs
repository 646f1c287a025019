use thiserror::Error;

/// Errors shared across the laboratory.
///
/// Variants mirror the failure modes of the individual operations; messages
/// carry enough context to reproduce the offending call.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("scale mismatch: {0}")]
    ScaleMismatch(String),

    #[error("scale not a power of 2: {0}")]
    ScaleNotDyadic(f64),

    #[error("scale exponent {0} outside supported range [2, 12]")]
    ScaleRange(u32),

    #[error("sub-grid dilation: rho = {rho} is below grid scale {delta}")]
    SubGridDilation { rho: f64, delta: f64 },

    #[error("radius below grid resolution: r = {r} at grid scale {delta}")]
    SubGridRadius { r: f64, delta: f64 },

    #[error("undefined zeta: ball at {center:?} with r = {r}, rho = {rho} misses the dilated set")]
    UndefinedZeta { center: [f64; 3], r: f64, rho: f64 },

    #[error("amplification did not converge within {0} iterations")]
    AmplificationDiverged(usize),

    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),

    #[error("dichotomy inconclusive: {0}")]
    DichotomyInconclusive(String),

    #[error("could not meet CWA budget {budget} after {tries} tries (best error {best})")]
    CwaBudget { budget: f64, tries: usize, best: f64 },

    #[error("degenerate sigma: a single-solid family has no growth exponent")]
    DegenerateSigma,

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid shading: {0}")]
    Shading(String),

    #[error("infeasible generator request: {0}")]
    Infeasible(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed input: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, LabError>;
