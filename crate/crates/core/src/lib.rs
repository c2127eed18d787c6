//! Numerical core for nested deep BSDE valuation of portfolios of options:
//! clean values, initial margin and the family of valuation adjustments.

pub mod autodiff;
pub mod deep_bsde;
pub mod initial_margin;
pub mod portfolio;
pub mod reference;
pub mod stochastic;
