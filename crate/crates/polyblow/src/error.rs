use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Model parameters outside the supported family.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// A mode index beyond what the basis or a table supports.
    #[error("mode index {k} out of range (max {max})")]
    ModeOutOfRange { k: usize, max: usize },

    /// Quadrature or table construction parameters that cannot work.
    #[error("invalid kernel spec: {0}")]
    KernelSpec(String),

    /// Kernel table failed its total-mass self check; the table is unusable.
    #[error("kernel mass check failed: integral = {mass:.17e}, |mass - 1| > {tol:.3e}")]
    MassCheck { mass: f64, tol: f64 },

    /// A computation needs samples farther out than the stored table reaches.
    #[error("kernel table too narrow: need |y| <= {needed:.3}, table holds {have:.3}")]
    TableTooNarrow { needed: f64, have: f64 },

    /// Semigroup action on a grid that cannot hold the kernel tail.
    #[error("domain half width {have:.3} too narrow for the semigroup kernel tail: need >= {needed:.3}")]
    DomainTooNarrow { needed: f64, have: f64 },

    /// The semigroup kernel is only defined for positive times.
    #[error("semigroup time must be positive, got {0}")]
    NonpositiveTime(f64),

    /// Time stepper exceeded the divergence guard.
    #[error("solution diverged at s = {s:.6}: sup|w| = {sup:.6e} exceeds guard {guard:.6e}")]
    Diverged { s: f64, sup: f64, guard: f64 },

    /// Linear solve hit a numerically singular pivot.
    #[error("singular linear system: pivot {pivot:.3e} at column {col}")]
    SingularMatrix { col: usize, pivot: f64 },

    /// Run configuration that parses but cannot be executed.
    #[error("invalid config: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
