//! Deep BSDE solvers: clean values (layer 1), the collateral, margin and
//! default adjustments (layer 3), the funding adjustment (layer 4) and a
//! one-factor linear problem with a closed-form solution.

mod adjustments;
mod clean;
mod linear;

use serde::{Deserialize, Serialize};

pub use adjustments::{
    adjustment_paths, adjustments_along, compensator, prepare_measure, terminal_errors, train_adjustments,
    train_funding, AdjustmentGroup, AdjustmentKind, AdjustmentModel, AdjustmentPaths, FundingModel, LayerMode,
    LowerLayers, MeasureSet, PreparedMeasure, TerminalErrors, TiltPair,
};
pub use clean::{clean_value_paths, train_clean, CleanModel, CleanPaths};
pub use linear::{train_linear, LinearFit, LinearProblem};

use crate::autodiff::{AdamConfig, AutodiffError, ContainerError, LrSchedule, Tensor};
use crate::initial_margin::ImError;
use crate::portfolio::PortfolioError;
use crate::stochastic::{PathBatch, SimulationError};

#[derive(Debug, thiserror::Error)]
pub enum BsdeError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Portfolio(#[from] PortfolioError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Margin(#[from] ImError),
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
}

/// Sample pool, batching and optimizer settings shared by the BSDE layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Size of the simulated training pool.
    pub samples: usize,
    pub batch_size: usize,
    /// Passes over the pool.
    pub epochs: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub lr: LrSchedule,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), BsdeError> {
        if self.batch_size == 0 || self.samples == 0 || !self.samples.is_multiple_of(self.batch_size) {
            return Err(BsdeError::Config(format!(
                "sample pool {} must be a positive multiple of the batch size {}",
                self.samples, self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(BsdeError::Config("at least one epoch is required".into()));
        }
        if self.hidden.contains(&0) {
            return Err(BsdeError::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.samples / self.batch_size
    }

    pub fn iterations(&self) -> usize {
        self.epochs * self.batches_per_epoch()
    }
}

/// Per-iteration optimizer diagnostics in long format.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingCurve {
    pub rows: Vec<CurveRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub iteration: usize,
    pub metric: String,
    pub value: f64,
}

impl TrainingCurve {
    pub fn push(&mut self, iteration: usize, metric: impl Into<String>, value: f64) {
        self.rows.push(CurveRow {
            iteration,
            metric: metric.into(),
            value,
        });
    }

    pub fn last(&self, metric: &str) -> Option<f64> {
        self.rows.iter().rev().find(|r| r.metric == metric).map(|r| r.value)
    }

    pub fn series(&self, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn extend(&mut self, other: TrainingCurve) {
        self.rows.extend(other.rows);
    }
}

/// Network input rows ordered step-major: row `n * B + b` holds
/// `(t_n / T, X_{b,n}[..width])` for `n < N`.
pub(crate) fn time_state_inputs(batch: &PathBatch, width: usize, horizon: f64, h: f64) -> Tensor {
    let (b, n_steps) = (batch.n_paths, batch.steps);
    let cols = 1 + width;
    let mut data = Vec::with_capacity(n_steps * b * cols);
    for n in 0..n_steps {
        let t = n as f64 * h / horizon;
        for p in 0..b {
            data.push(t);
            data.extend_from_slice(&batch.state(p, n)[..width]);
        }
    }
    Tensor::new([n_steps * b, cols], data).expect("input layout")
}

/// Increments in the same step-major row order, gathered by `columns`.
pub(crate) fn gathered_increments(batch: &PathBatch, columns: &[usize]) -> Tensor {
    let (b, n_steps) = (batch.n_paths, batch.steps);
    let mut data = Vec::with_capacity(n_steps * b * columns.len());
    for n in 0..n_steps {
        for p in 0..b {
            let dw = batch.increments.at(p, n);
            data.extend(columns.iter().map(|&c| dw[c]));
        }
    }
    Tensor::new([n_steps * b, columns.len()], data).expect("increment layout")
}
