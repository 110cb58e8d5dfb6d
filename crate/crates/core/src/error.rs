use thiserror::Error;

/// Failure modes shared by every module.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no root in bracket [{lo}, {hi}]")]
    NoRootInBracket { lo: f64, hi: f64 },
    #[error("point ({x}, {z}) is off the chart (negative radicand {radicand})")]
    OffChart { x: f64, z: f64, radicand: f64 },
    #[error("degenerate spectrum: eigenvalues {0} and {1} coincide")]
    DegenerateSpectrum(f64, f64),
    #[error("budget exceeded: {what} needs {needed}, cap is {cap}")]
    BudgetExceeded { what: &'static str, needed: usize, cap: usize },
    #[error("truncation too small: {n_sites} sites cannot resolve t_max = {t_max}")]
    TruncationTooSmall { n_sites: usize, t_max: f64 },
    #[error("only {found} envelope maxima in window, need {needed}")]
    InsufficientEnvelope { found: usize, needed: usize },
    #[error("no convergence: {0}")]
    NonConvergence(String),
    #[error("orbit escaped after {0} steps")]
    OrbitEscaped(usize),
    #[error("ill-conditioned frame: angle {0:.3e} below margin")]
    IllConditioned(f64),
    #[error("traced segment folded")]
    SegmentFolded,
    #[error("local manifolds do not intersect within radius {0}")]
    NoIntersection(f64),
    #[error("finite-difference steps hit the noise floor")]
    StepTooSmall,
    #[error("continuation failed for {0} orbits")]
    ContinuationFailed(usize),
    #[error("only {found} pairs survive, need {needed}")]
    InsufficientPairs { found: usize, needed: usize },
    #[error("slot {0} of the block has no admissible words")]
    EmptySlot(usize),
}

pub type Result<T> = std::result::Result<T, Error>;
