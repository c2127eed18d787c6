//! Correlated Euler–Maruyama simulation on a uniform grid, counter-based
//! random numbers, grid default detection and drift tilts with their
//! likelihood weights.

mod defaults;
mod girsanov;
mod model;
mod paths;
mod rng;

pub use defaults::{detect_defaults, Barrier, DefaultSpec, DefaultTimes, Party};
pub use girsanov::{girsanov_logweight, reverse_logweight};
pub use model::{Correlation, MarketModel, TimeGrid};
pub use paths::{sample_increments, simulate, DriftTilt, Increments, PathBatch};
pub use rng::{derive_seed, NormalStream};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimulationError {
    #[error("invalid simulation setup: {0}")]
    Config(String),
    #[error("correlation matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("non-finite state encountered during simulation")]
    NonFinite,
    #[error("diffusion of component {component} degenerate at state {value}")]
    DegenerateDiffusion { component: usize, value: f64 },
}
