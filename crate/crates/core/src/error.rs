use thiserror::Error;

use crate::env::Site;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    // env
    #[error("ellipticity constant must be at least 2, got {0}")]
    EllipticityTooSmall(u32),
    #[error("marginal entry ({n}, {m}) lies outside the elliptic box {{2..={k}}}^2")]
    OutsideEllipticBox { n: u32, m: u32, k: u32 },
    #[error("marginal probabilities must be nonnegative (entry ({n}, {m}))")]
    NegativeProbability { n: u32, m: u32 },
    #[error("marginal sums to {0}, expected 1 within 1e-12")]
    NotNormalized(f64),
    #[error("duplicate marginal entry ({n}, {m})")]
    DuplicateEntry { n: u32, m: u32 },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("site {0:?} is not valid in this geometry")]
    InvalidSite(Site),
    #[error("operation requires a torus environment")]
    NotTorus,
    #[error("environment has {got} sites, geometry expects {expected}")]
    SiteCountMismatch { got: usize, expected: usize },

    // kernel
    #[error("origin rate a(0,0) must be positive")]
    ZeroOriginRate,
    #[error("negative migration rate at offset {0:?}")]
    NegativeRate(Site),
    #[error("kernel support does not generate Z^{0}")]
    NonGeneratingSupport(u8),
    #[error("kernel offset {0:?} does not fit dimension {1}")]
    OffsetDimension(Site, u8),
    #[error("kernel range {range} is too large for torus side {side}")]
    RangeTooLarge { range: i64, side: u32 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("exchange rate lambda must be positive")]
    NonPositiveLambda,
    #[error("environment exceeds ellipticity constant {k} (found size {found})")]
    EllipticityExceeded { k: u32, found: u32 },
    #[error("unknown kernel preset {0:?}")]
    UnknownPreset(String),

    // dsl
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier {name:?} at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("division by zero")]
    DivisionByZero,
    #[error("density value {value} at (N, M) = ({n}, {m}) lies outside [0, 1]")]
    DensityOutOfRange { value: f64, n: u32, m: u32 },

    // forward / dual
    #[error("operation requires a symmetric migration kernel")]
    AsymmetricKernel,
    #[error("state space has {size} states, limit is {limit}")]
    StateSpaceTooLarge { size: u128, limit: u128 },
    #[error("matrix dimension {dim} exceeds limit {limit}")]
    DimensionLimit { dim: usize, limit: usize },
    #[error("forward state does not fit the environment: {0}")]
    InconsistentState(String),
    #[error("linear solve did not converge after {0} sweeps")]
    NoConvergence(usize),
    #[error("Monte Carlo budget required for this instance")]
    BudgetExceeded,

    // envproc
    #[error("window enumeration has {0} configurations, too many to enumerate")]
    WindowTooLarge(u128),

    // spectral
    #[error("matrix is not row-stochastic (row {row} sums to {sum})")]
    NotStochastic { row: usize, sum: f64 },

    // stats
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
}

pub type Result<T> = std::result::Result<T, Error>;
