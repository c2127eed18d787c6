use serde::{Deserialize, Serialize};

use super::PortfolioError;
use crate::stochastic::TimeGrid;

/// Call on the geometric mean of a subset of the underlyings.
#[derive(Debug, Clone, PartialEq)]
pub struct Contract {
    /// Zero-based underlying indices.
    pub assets: Vec<usize>,
    pub maturity: f64,
    pub maturity_index: usize,
    pub strike: f64,
}

impl Contract {
    pub fn basket_size(&self) -> usize {
        self.assets.len()
    }

    pub fn geometric_mean(&self, x: &[f64]) -> Result<f64, PortfolioError> {
        let mut s = 0.0;
        for &i in &self.assets {
            let v = *x.get(i).ok_or(PortfolioError::StateTooShort {
                needed: i + 1,
                got: x.len(),
            })?;
            if !(v > 0.0) {
                return Err(PortfolioError::NonPositiveState { index: i, value: v });
            }
            s += v.ln();
        }
        Ok((s / self.assets.len() as f64).exp())
    }

    pub fn payoff(&self, x: &[f64]) -> Result<f64, PortfolioError> {
        Ok((self.geometric_mean(x)? - self.strike).max(0.0))
    }
}

/// Serialized form: one-based asset indices as they appear in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractSpec {
    pub assets: Vec<usize>,
    pub maturity: f64,
    pub strike: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioFile {
    pub contract: Vec<ContractSpec>,
}

/// Contracts with the column layout of the stacked hedge network output:
/// contract `j` owns columns `offsets[j] .. offsets[j] + |assets_j|`.
#[derive(Debug, Clone, PartialEq)]
pub struct Portfolio {
    pub contracts: Vec<Contract>,
    pub offsets: Vec<usize>,
    pub underlyings: usize,
}

impl Portfolio {
    pub fn new(specs: &[ContractSpec], underlyings: usize, grid: &TimeGrid) -> Result<Self, PortfolioError> {
        if specs.is_empty() {
            return Err(PortfolioError::Invalid("portfolio has no contracts".into()));
        }
        let mut contracts = Vec::with_capacity(specs.len());
        for (j, s) in specs.iter().enumerate() {
            if s.assets.is_empty() {
                return Err(PortfolioError::Invalid(format!("contract {j} has no assets")));
            }
            let mut seen = vec![false; underlyings];
            let mut assets = Vec::with_capacity(s.assets.len());
            for &a in &s.assets {
                if a == 0 || a > underlyings {
                    return Err(PortfolioError::Invalid(format!(
                        "contract {j}: asset {a} outside 1..={underlyings}"
                    )));
                }
                if seen[a - 1] {
                    return Err(PortfolioError::Invalid(format!("contract {j}: asset {a} repeated")));
                }
                seen[a - 1] = true;
                assets.push(a - 1);
            }
            if !(s.strike > 0.0) {
                return Err(PortfolioError::Invalid(format!(
                    "contract {j}: strike must be positive"
                )));
            }
            let maturity_index = grid.index_of(s.maturity).filter(|&n| n >= 1).ok_or_else(|| {
                PortfolioError::Invalid(format!(
                    "contract {j}: maturity {} is not a grid point in (0, {}]",
                    s.maturity, grid.maturity
                ))
            })?;
            contracts.push(Contract {
                assets,
                maturity: s.maturity,
                maturity_index,
                strike: s.strike,
            });
        }
        let mut offsets = Vec::with_capacity(contracts.len());
        let mut acc = 0;
        for c in &contracts {
            offsets.push(acc);
            acc += c.basket_size();
        }
        Ok(Self {
            contracts,
            offsets,
            underlyings,
        })
    }

    pub fn from_toml(text: &str, underlyings: usize, grid: &TimeGrid) -> Result<Self, PortfolioError> {
        let file: PortfolioFile =
            toml::from_str(text).map_err(|e| PortfolioError::Invalid(format!("portfolio file: {e}")))?;
        Self::new(&file.contract, underlyings, grid)
    }

    pub fn len(&self) -> usize {
        self.contracts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contracts.is_empty()
    }

    /// Total width of the stacked hedge output.
    pub fn total_width(&self) -> usize {
        self.contracts.iter().map(Contract::basket_size).sum()
    }

    pub fn block_widths(&self) -> Vec<usize> {
        self.contracts.iter().map(Contract::basket_size).collect()
    }

    /// For every stacked column, the underlying whose increment it multiplies.
    pub fn column_assets(&self) -> Vec<usize> {
        self.contracts.iter().flat_map(|c| c.assets.iter().copied()).collect()
    }

    pub fn specs(&self) -> Vec<ContractSpec> {
        self.contracts
            .iter()
            .map(|c| ContractSpec {
                assets: c.assets.iter().map(|a| a + 1).collect(),
                maturity: c.maturity,
                strike: c.strike,
            })
            .collect()
    }

    /// Payment received by the bank at grid node `n`: each contract pays its
    /// payoff at its maturity index and nothing elsewhere.
    pub fn cashflow_jump(&self, n: usize, x: &[f64]) -> Result<Vec<f64>, PortfolioError> {
        self.contracts
            .iter()
            .map(|c| if c.maturity_index == n { c.payoff(x) } else { Ok(0.0) })
            .collect()
    }
}
