//! Run configuration: TOML schema, validation and the objects derived from it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xva_core::deep_bsde::{AdjustmentKind, LayerMode, MeasureSet, TiltPair, TrainConfig};
use xva_core::initial_margin::{ImTrainConfig, RiskMeasure};
use xva_core::portfolio::{AdjustmentRates, Portfolio};
use xva_core::reference::ReferenceSpec;
use xva_core::stochastic::{Barrier, Correlation, DefaultSpec, MarketModel, TimeGrid};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub grid: GridConfig,
    pub market: MarketConfig,
    pub portfolio: PortfolioConfig,
    pub defaults: DefaultsConfig,
    pub rates: RatesConfig,
    pub margin: MarginConfig,
    pub tilts: MeasureSet,
    pub layer1: TrainConfig,
    pub layer2: ImTrainConfig,
    pub layer3: Layer3Config,
    pub layer4: TrainConfig,
    pub report: ReportConfig,
    pub reference: ReferenceConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub maturity: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    pub rate: f64,
    pub underlying_vols: Vec<f64>,
    /// Bank then counterparty.
    pub default_vols: [f64; 2],
    /// Initial values of all `d + 2` components.
    pub x0: Vec<f64>,
    pub correlation: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortfolioConfig {
    /// Relative to the directory of the configuration file.
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefaultsConfig {
    pub bank_barrier: Barrier,
    pub cpty_barrier: Barrier,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatesConfig {
    pub collateral_borrow: f64,
    pub collateral_lend: f64,
    pub im_borrow: f64,
    pub im_lend: f64,
    pub funding_borrow: f64,
    pub funding_lend: f64,
    pub lgd_bank: f64,
    pub lgd_cpty: f64,
    pub collateral_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginConfig {
    pub alpha: f64,
    pub mpr: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer3Config {
    #[serde(default = "lower_kinds")]
    pub kinds: Vec<AdjustmentKind>,
    #[serde(default)]
    pub mode: LayerMode,
    #[serde(flatten)]
    pub train: TrainConfig,
}

fn lower_kinds() -> Vec<AdjustmentKind> {
    AdjustmentKind::LOWER.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// Paths behind the percentile bands and the terminal-error distributions.
    pub eval_paths: usize,
    /// Paths written out step by step for the path figures.
    pub sample_paths: usize,
    /// Paths in the optional simulation dump.
    #[serde(default = "default_dump")]
    pub dump_paths: usize,
}

fn default_dump() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub refinement: usize,
    pub inner_paths: usize,
    pub quantile_paths: usize,
    /// Outer path ids from the report evaluation batch.
    pub paths: Vec<usize>,
    /// Outer grid steps at which references are computed.
    pub steps: Vec<usize>,
}

/// Everything a pipeline stage needs, checked and built once.
#[derive(Debug, Clone)]
pub struct Setup {
    pub config: RunConfig,
    pub config_bytes: Vec<u8>,
    pub portfolio_bytes: Vec<u8>,
    pub grid: TimeGrid,
    pub market: MarketModel,
    pub portfolio: Portfolio,
    pub defaults: DefaultSpec,
    pub rates: AdjustmentRates,
    pub risk: RiskMeasure,
}

fn config_error(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(config_error)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }
}

impl Setup {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let config_bytes = std::fs::read(path).map_err(|_| CliError::Missing(path.to_path_buf()))?;
        let text = String::from_utf8(config_bytes.clone()).map_err(config_error)?;
        let config = RunConfig::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let portfolio_path = base.join(&config.portfolio.file);
        let portfolio_bytes = std::fs::read(&portfolio_path).map_err(|_| CliError::Missing(portfolio_path.clone()))?;
        Self::build(config, config_bytes, portfolio_bytes)
    }

    pub fn build(config: RunConfig, config_bytes: Vec<u8>, portfolio_bytes: Vec<u8>) -> Result<Self, CliError> {
        let c = &config;
        let grid = TimeGrid::new(c.grid.maturity, c.grid.steps).map_err(config_error)?;
        let d = c.market.underlying_vols.len();
        let mut vols = c.market.underlying_vols.clone();
        vols.extend_from_slice(&c.market.default_vols);
        let correlation = Correlation::new(&c.market.correlation).map_err(config_error)?;
        let market = MarketModel::new(c.market.rate, vols, c.market.x0.clone(), correlation).map_err(config_error)?;
        let text = String::from_utf8(portfolio_bytes.clone()).map_err(config_error)?;
        let portfolio = Portfolio::from_toml(&text, d, &grid).map_err(config_error)?;
        let defaults = DefaultSpec {
            bank_index: d,
            cpty_index: d + 1,
            bank_barrier: c.defaults.bank_barrier.clone(),
            cpty_barrier: c.defaults.cpty_barrier.clone(),
        };
        for (name, b) in [
            ("bank", &defaults.bank_barrier),
            ("counterparty", &defaults.cpty_barrier),
        ] {
            if let Barrier::Schedule(v) = b {
                if v.len() != grid.steps + 1 {
                    return Err(CliError::Config(format!(
                        "{name} barrier schedule has {} entries, grid has {}",
                        v.len(),
                        grid.steps + 1
                    )));
                }
            }
        }
        let r = c.rates;
        let rates = AdjustmentRates {
            risk_free: c.market.rate,
            collateral_borrow: r.collateral_borrow,
            collateral_lend: r.collateral_lend,
            im_lend: r.im_lend,
            im_borrow: r.im_borrow,
            funding_borrow: r.funding_borrow,
            funding_lend: r.funding_lend,
            lgd_bank: r.lgd_bank,
            lgd_cpty: r.lgd_cpty,
            collateral_fraction: r.collateral_fraction,
        };
        for (name, v) in [
            ("lgd_bank", r.lgd_bank),
            ("lgd_cpty", r.lgd_cpty),
            ("collateral_fraction", r.collateral_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CliError::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        let risk = RiskMeasure {
            alpha: c.margin.alpha,
            mpr: c.margin.mpr,
        };
        risk.validate().map_err(config_error)?;
        c.layer1.validate().map_err(config_error)?;
        c.layer2.validate().map_err(config_error)?;
        c.layer3.train.validate().map_err(config_error)?;
        c.layer4.validate().map_err(config_error)?;
        if c.layer3.kinds.is_empty() || c.layer3.kinds.contains(&AdjustmentKind::Fva) {
            return Err(CliError::Config(
                "layer3.kinds must be a non-empty subset of colva, cva, dva, mva".into(),
            ));
        }
        if c.report.eval_paths == 0 || c.report.sample_paths > c.report.eval_paths {
            return Err(CliError::Config(
                "report needs eval_paths > 0 and sample_paths <= eval_paths".into(),
            ));
        }
        c.reference_spec().validate().map_err(config_error)?;
        if let Some(p) = c.reference.paths.iter().find(|&&p| p >= c.report.eval_paths) {
            return Err(CliError::Config(format!(
                "reference path {p} outside the {} evaluation paths",
                c.report.eval_paths
            )));
        }
        if let Some(n) = c.reference.steps.iter().find(|&&n| n >= grid.steps) {
            return Err(CliError::Config(format!(
                "reference step {n} must precede the horizon {}",
                grid.steps
            )));
        }
        Ok(Self {
            config,
            config_bytes,
            portfolio_bytes,
            grid,
            market,
            portfolio,
            defaults,
            rates,
            risk,
        })
    }

    pub fn underlyings(&self) -> usize {
        self.portfolio.underlyings
    }

    /// Human-readable derived quantities printed by `validate`.
    pub fn summary(&self) -> Vec<(String, String)> {
        let basket: usize = self.portfolio.contracts.iter().map(|c| c.basket_size()).sum();
        vec![
            ("contracts".into(), self.portfolio.len().to_string()),
            ("sum of basket sizes".into(), basket.to_string()),
            ("underlyings".into(), self.underlyings().to_string()),
            ("state dimension".into(), self.market.dim().to_string()),
            ("time steps".into(), self.grid.steps.to_string()),
            ("step size".into(), format!("{}", self.grid.h())),
            ("margin period (steps)".into(), self.risk.mpr.to_string()),
        ]
    }
}

impl RunConfig {
    pub fn reference_spec(&self) -> ReferenceSpec {
        ReferenceSpec {
            refinement: self.reference.refinement,
            inner_paths: self.reference.inner_paths,
            quantile_paths: self.reference.quantile_paths,
        }
    }

    pub fn funding_tilt(&self) -> TiltPair {
        self.tilts.fva
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_text() -> String {
        std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk_scale.toml")).unwrap()
    }

    fn portfolio() -> Vec<u8> {
        std::fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/portfolio_desk.toml")).unwrap()
    }

    fn build(text: &str) -> Result<Setup, CliError> {
        Setup::build(RunConfig::parse(text)?, text.as_bytes().to_vec(), portfolio())
    }

    #[test]
    fn desk_config_builds() {
        let s = build(&desk_text()).unwrap();
        assert_eq!(s.underlyings(), 2);
        assert_eq!(s.market.dim(), 4);
        assert_eq!((s.defaults.bank_index, s.defaults.cpty_index), (2, 3));
        assert_eq!(s.config.layer3.kinds, AdjustmentKind::LOWER.to_vec());
        assert_eq!(s.config.layer3.mode, LayerMode::Split);
        assert_eq!(s.rates.risk_free, 0.05);
    }

    #[test]
    fn barrier_schedule_must_match_grid() {
        let text = desk_text().replace("cpty_barrier = 0.675", "cpty_barrier = [0.6, 0.6]");
        assert!(matches!(build(&text), Err(CliError::Config(m)) if m.contains("schedule")));
    }

    #[test]
    fn funding_is_not_a_third_layer_kind() {
        let text = desk_text().replace("[layer3]\n", "[layer3]\nkinds = [\"cva\", \"fva\"]\n");
        assert!(matches!(build(&text), Err(CliError::Config(_))));
        let text = desk_text().replace("[layer3]\n", "[layer3]\nkinds = [\"cva\"]\n");
        assert_eq!(build(&text).unwrap().config.layer3.kinds, vec![AdjustmentKind::Cva]);
    }

    #[test]
    fn reference_steps_precede_the_horizon() {
        let text = desk_text().replace("steps = [0, 10, 25, 40]", "steps = [0, 50]");
        assert!(matches!(build(&text), Err(CliError::Config(_))));
    }
}
