use num_complex::Complex64;
use thiserror::Error;

/// Errors raised by the spectral pipeline.
#[derive(Debug, Clone, Error)]
pub enum SpectralError {
    #[error("invalid operator spec: {0}")]
    InvalidSpec(String),

    #[error("mean matrix has nearly coincident eigenvalues (gap {gap:.3e} < threshold {threshold:.3e})")]
    NearDegenerateMeanMatrix { gap: f64, threshold: f64 },

    #[error("integrator failure at x = {x:.6}: {reason}")]
    IntegratorFailure { x: f64, reason: String },

    #[error("|lambda| = {modulus:.3e} exceeds the configured budget {budget:.3e}")]
    LambdaBudgetExceeded { modulus: f64, budget: f64 },

    #[error("leading coefficient of the characteristic polynomial vanished ({0:.3e})")]
    DegenerateLeadingCoefficient(f64),

    #[error("quasimomentum t = {t} lies within {eps} of pi*Z (even order)")]
    InadmissibleQuasimomentum { t: Complex64, eps: f64 },

    #[error("Newton iteration did not converge: last iterate {last}, residual {residual:.3e}")]
    NoConvergence { last: Complex64, residual: f64 },

    #[error("homotopy path jumped by {jump:.3e} (allowed {allowed:.3e}) at epsilon = {epsilon}")]
    PathJump { epsilon: f64, jump: f64, allowed: f64 },

    #[error("eigenvalue {lambda} is not numerically simple (singular values {sigma_min:.3e}, {sigma_next:.3e})")]
    NotSimple { lambda: Complex64, sigma_min: f64, sigma_next: f64 },

    #[error("all cofactors of the boundary determinant vanish at lambda = {0}")]
    ZeroCofactor(Complex64),

    #[error("biorthogonal pairing |alpha| = {0:.3e} vanishes (candidate spectral singularity)")]
    VanishingPairing(f64),

    #[error("band tracking jumped at t = {t}: |d lambda| = {jump:.3e} > {allowed:.3e}")]
    TrackingJump { t: Complex64, jump: f64, allowed: f64 },

    #[error("bands {first} and {second} collide near t = {t} (candidate exceptional point)")]
    CollisionDetected { t: Complex64, first: usize, second: usize },

    #[error("found {found} low-band eigenvalues inside the counting circle, expected {expected}")]
    LowBandCount { found: usize, expected: usize },

    #[error("residual report needs at least 5 distinct |k|, got {0}")]
    InsufficientRange(usize),

    #[error("could not resolve simple bands near t* = {t_star} at distance {distance:.3e}")]
    BandResolutionFailure { t_star: Complex64, distance: f64 },

    #[error("Gelfand transform diverges: Im t = {im_t} >= decay rate {alpha}")]
    DivergentTransform { im_t: f64, alpha: f64 },

    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    #[error("band {0} carries a spectral-singularity flag; real-line expansion is not valid")]
    SingularBandInRealLineMode(usize),

    #[error("Taylor jet of order {order} could not be estimated at {center}")]
    JetEstimationFailure { center: Complex64, order: usize },
}

pub type Result<T> = std::result::Result<T, SpectralError>;
