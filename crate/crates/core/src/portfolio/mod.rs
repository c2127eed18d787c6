//! Geometric-basket call portfolios, their closed-form values, and the
//! collateral, close-out and adjustment drivers built on top of them.

mod adjustments;
mod analytic;
mod contract;

pub use adjustments::{collateral, total_adjustment, AdjustmentRates};
pub use analytic::{
    analytic_clean_value, analytic_portfolio_value, call_value, geometric_reduction, norm_cdf, GeometricReduction,
};
pub use contract::{Contract, ContractSpec, Portfolio, PortfolioFile};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PortfolioError {
    #[error("invalid portfolio: {0}")]
    Invalid(String),
    #[error("state has {got} components, contract needs {needed}")]
    StateTooShort { needed: usize, got: usize },
    #[error("underlying {index} is non-positive ({value}); geometric mean undefined")]
    NonPositiveState { index: usize, value: f64 },
}
