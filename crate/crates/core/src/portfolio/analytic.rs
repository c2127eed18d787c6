use statrs::distribution::{ContinuousCDF, Normal};

use super::contract::{Contract, Portfolio};
use super::PortfolioError;
use crate::stochastic::MarketModel;

/// The geometric mean of correlated geometric Brownian motions is itself a
/// geometric Brownian motion with volatility `sigma` and drift `drift`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricReduction {
    pub sigma: f64,
    pub drift: f64,
}

pub fn geometric_reduction(contract: &Contract, model: &MarketModel) -> GeometricReduction {
    let k = contract.basket_size() as f64;
    let mut var = 0.0;
    let mut sum_sq = 0.0;
    for &i in &contract.assets {
        sum_sq += model.vols[i] * model.vols[i];
        for &l in &contract.assets {
            var += model.correlation.get(i, l) * model.vols[i] * model.vols[l];
        }
    }
    var /= k * k;
    GeometricReduction {
        sigma: var.sqrt(),
        drift: model.rate - sum_sq / (2.0 * k) + var / 2.0,
    }
}

pub fn norm_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Black–Scholes call on a geometric Brownian motion with drift `mu` under
/// the pricing measure, discounted at `rate`.
pub fn call_value(s: f64, strike: f64, tau: f64, rate: f64, mu: f64, sigma: f64) -> f64 {
    if tau <= 0.0 {
        return (s - strike).max(0.0);
    }
    let sd = sigma * tau.sqrt();
    let fwd = s * (mu * tau).exp();
    let d1 = ((fwd / strike).ln() + 0.5 * sd * sd) / sd;
    let d2 = d1 - sd;
    (-rate * tau).exp() * (fwd * norm_cdf(d1) - strike * norm_cdf(d2))
}

/// Closed-form clean value at time `t` and state `x`; equals the payoff at
/// maturity and zero afterwards.
pub fn analytic_clean_value(
    t: f64,
    x: &[f64],
    contract: &Contract,
    model: &MarketModel,
) -> Result<f64, PortfolioError> {
    let tau = contract.maturity - t;
    if tau < -1e-12 {
        return Ok(0.0);
    }
    let g = contract.geometric_mean(x)?;
    if tau <= 1e-12 {
        return Ok((g - contract.strike).max(0.0));
    }
    let red = geometric_reduction(contract, model);
    Ok(call_value(g, contract.strike, tau, model.rate, red.drift, red.sigma))
}

/// Sum of the contracts' closed-form values.
pub fn analytic_portfolio_value(
    t: f64,
    x: &[f64],
    portfolio: &Portfolio,
    model: &MarketModel,
) -> Result<f64, PortfolioError> {
    portfolio
        .contracts
        .iter()
        .map(|c| analytic_clean_value(t, x, c, model))
        .sum()
}
