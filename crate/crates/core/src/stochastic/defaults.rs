use serde::{Deserialize, Serialize};

use super::model::TimeGrid;
use super::paths::PathBatch;
use super::SimulationError;

/// Default barrier, either flat or given per grid node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Barrier {
    Constant(f64),
    Schedule(Vec<f64>),
}

impl Barrier {
    pub fn at(&self, n: usize) -> f64 {
        match self {
            Barrier::Constant(v) => *v,
            Barrier::Schedule(v) => v[n],
        }
    }

    fn check(&self, grid: &TimeGrid) -> Result<(), SimulationError> {
        if let Barrier::Schedule(v) = self {
            if v.len() != grid.steps + 1 {
                return Err(SimulationError::Config(format!(
                    "barrier schedule has {} nodes, grid has {}",
                    v.len(),
                    grid.steps + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Party {
    Bank,
    Counterparty,
}

/// Positions of the default drivers in the state vector and their barriers.
#[derive(Debug, Clone, PartialEq)]
pub struct DefaultSpec {
    pub bank_index: usize,
    pub cpty_index: usize,
    pub bank_barrier: Barrier,
    pub cpty_barrier: Barrier,
}

/// First grid index `n >= 1` at which each party's driver is at or below its
/// barrier; `N + 1` when it never is.
#[derive(Debug, Clone, PartialEq)]
pub struct DefaultTimes {
    pub steps: usize,
    pub bank: Vec<usize>,
    pub cpty: Vec<usize>,
}

impl DefaultTimes {
    pub fn sentinel(&self) -> usize {
        self.steps + 1
    }

    pub fn first(&self, path: usize) -> usize {
        self.bank[path].min(self.cpty[path])
    }

    /// Stopping index `min(n_tau, N)`.
    pub fn stop(&self, path: usize) -> usize {
        self.first(path).min(self.steps)
    }

    /// Party defaulting first within the horizon; ties go to the counterparty.
    pub fn first_defaulter(&self, path: usize) -> Option<Party> {
        let (b, c) = (self.bank[path], self.cpty[path]);
        if c <= self.steps && c <= b {
            Some(Party::Counterparty)
        } else if b <= self.steps && b < c {
            Some(Party::Bank)
        } else {
            None
        }
    }

    /// No defaults at all, for runs without default drivers.
    pub fn none(n_paths: usize, steps: usize) -> Self {
        Self {
            steps,
            bank: vec![steps + 1; n_paths],
            cpty: vec![steps + 1; n_paths],
        }
    }
}

pub fn detect_defaults(
    batch: &PathBatch,
    spec: &DefaultSpec,
    grid: &TimeGrid,
) -> Result<DefaultTimes, SimulationError> {
    if spec.bank_index >= batch.dim || spec.cpty_index >= batch.dim {
        return Err(SimulationError::Config(format!(
            "default driver indices ({}, {}) outside state dimension {}",
            spec.bank_index, spec.cpty_index, batch.dim
        )));
    }
    spec.bank_barrier.check(grid)?;
    spec.cpty_barrier.check(grid)?;
    let first_hit = |path: usize, idx: usize, barrier: &Barrier| {
        (1..=batch.steps)
            .find(|&n| batch.component(path, n, idx) <= barrier.at(n))
            .unwrap_or(batch.steps + 1)
    };
    Ok(DefaultTimes {
        steps: batch.steps,
        bank: (0..batch.n_paths)
            .map(|p| first_hit(p, spec.bank_index, &spec.bank_barrier))
            .collect(),
        cpty: (0..batch.n_paths)
            .map(|p| first_hit(p, spec.cpty_index, &spec.cpty_barrier))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic::{sample_increments, simulate, Correlation, DriftTilt, MarketModel};

    #[test]
    fn barrier_above_start_defaults_at_first_step() {
        let corr = Correlation::identity(2);
        let m = MarketModel::new(0.05, vec![0.2, 0.3], vec![1.0, 1.0], corr.clone()).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let inc = sample_increments(1, 0, 5, &grid, &corr);
        let b = simulate(&m, &DriftTilt::zero(2), &inc, &grid).unwrap();
        let spec = DefaultSpec {
            bank_index: 0,
            cpty_index: 1,
            bank_barrier: Barrier::Constant(0.0),
            cpty_barrier: Barrier::Constant(10.0),
        };
        let dt = detect_defaults(&b, &spec, &grid).unwrap();
        for p in 0..5 {
            assert_eq!(dt.cpty[p], 1);
            assert_eq!(dt.bank[p], 11);
            assert_eq!(dt.stop(p), 1);
            assert_eq!(dt.first_defaulter(p), Some(Party::Counterparty));
        }
    }

    #[test]
    fn tie_goes_to_counterparty() {
        let dt = DefaultTimes {
            steps: 10,
            bank: vec![4, 3, 11],
            cpty: vec![4, 5, 11],
        };
        assert_eq!(dt.first_defaulter(0), Some(Party::Counterparty));
        assert_eq!(dt.first_defaulter(1), Some(Party::Bank));
        assert_eq!(dt.first_defaulter(2), None);
        assert_eq!(dt.stop(2), 10);
    }
}
