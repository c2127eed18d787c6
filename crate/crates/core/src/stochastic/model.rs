use serde::{Deserialize, Serialize};

use super::SimulationError;

/// Uniform grid `t_n = n * T / N`, `n = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub maturity: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(maturity: f64, steps: usize) -> Result<Self, SimulationError> {
        if !(maturity > 0.0) || steps == 0 {
            return Err(SimulationError::Config(format!(
                "time grid needs T > 0 and N > 0, got T = {maturity}, N = {steps}"
            )));
        }
        Ok(Self { maturity, steps })
    }

    pub fn h(&self) -> f64 {
        self.maturity / self.steps as f64
    }

    pub fn t(&self, n: usize) -> f64 {
        n as f64 * self.h()
    }

    /// Grid index of time `t` when it lies on the grid.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = t / self.h();
        let n = x.round();
        ((x - n).abs() < 1e-9 && n >= 0.0 && n as usize <= self.steps).then_some(n as usize)
    }
}

/// Correlation matrix with its Cholesky factor and inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct Correlation {
    dim: usize,
    matrix: Vec<f64>,
    lower: Vec<f64>,
    inverse: Vec<f64>,
}

impl Correlation {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self, SimulationError> {
        let dim = rows.len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(SimulationError::Config("correlation matrix must be square".into()));
        }
        let matrix: Vec<f64> = rows.iter().flatten().copied().collect();
        for i in 0..dim {
            if (matrix[i * dim + i] - 1.0).abs() > 1e-12 {
                return Err(SimulationError::Config(format!(
                    "correlation diagonal entry {i} is {}",
                    matrix[i * dim + i]
                )));
            }
            for j in 0..i {
                if (matrix[i * dim + j] - matrix[j * dim + i]).abs() > 1e-12 {
                    return Err(SimulationError::Config(format!(
                        "correlation matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let lower = cholesky(&matrix, dim)?;
        let inverse = spd_inverse(&lower, dim);
        Ok(Self {
            dim,
            matrix,
            lower,
            inverse,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let rows: Vec<Vec<f64>> = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::new(&rows).expect("identity is positive definite")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.dim + j]
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn inverse(&self) -> &[f64] {
        &self.inverse
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.matrix.chunks(self.dim).map(|r| r.to_vec()).collect()
    }

    /// Leading `k x k` block.
    pub fn leading(&self, k: usize) -> Result<Self, SimulationError> {
        if k == 0 || k > self.dim {
            return Err(SimulationError::Config(format!(
                "leading block {k} of a {}-dimensional correlation",
                self.dim
            )));
        }
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|i| self.matrix[i * self.dim..i * self.dim + k].to_vec())
            .collect();
        Self::new(&rows)
    }

    /// `out = L z`.
    pub fn correlate(&self, z: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            let row = &self.lower[i * d..i * d + i + 1];
            out[i] = row.iter().zip(z).map(|(a, b)| a * b).sum();
        }
    }

    /// `a^T rho^{-1} b`.
    pub fn inverse_form(&self, a: &[f64], b: &[f64]) -> f64 {
        let d = self.dim;
        let mut s = 0.0;
        for i in 0..d {
            if a[i] == 0.0 {
                continue;
            }
            let row = &self.inverse[i * d..(i + 1) * d];
            s += a[i] * row.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        }
        s
    }
}

fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>, SimulationError> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if d <= 1e-14 {
                    return Err(SimulationError::NotPositiveDefinite);
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn spd_inverse(l: &[f64], n: usize) -> Vec<f64> {
    // Solve L L^T X = I column by column.
    let mut inv = vec![0.0; n * n];
    let mut y = vec![0.0; n];
    for c in 0..n {
        for i in 0..n {
            let b = if i == c { 1.0 } else { 0.0 };
            let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
            y[i] = (b - s) / l[i * n + i];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l[k * n + i] * inv[k * n + c]).sum();
            inv[i * n + c] = (y[i] - s) / l[i * n + i];
        }
    }
    inv
}

/// Geometric Brownian motions `dX_i = r X_i dt + vol_i X_i dW_i` with correlated
/// drivers. The first `d` components are the underlyings, any remaining ones
/// are the default drivers of bank and counterparty.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketModel {
    pub rate: f64,
    pub vols: Vec<f64>,
    pub x0: Vec<f64>,
    pub correlation: Correlation,
}

impl MarketModel {
    pub fn new(rate: f64, vols: Vec<f64>, x0: Vec<f64>, correlation: Correlation) -> Result<Self, SimulationError> {
        let k = vols.len();
        if x0.len() != k || correlation.dim() != k {
            return Err(SimulationError::Config(format!(
                "dimension mismatch: {k} vols, {} initial values, {}-dimensional correlation",
                x0.len(),
                correlation.dim()
            )));
        }
        if vols.iter().any(|v| !(*v > 0.0)) || x0.iter().any(|v| !(*v > 0.0)) {
            return Err(SimulationError::Config(
                "volatilities and initial values must be positive".into(),
            ));
        }
        Ok(Self {
            rate,
            vols,
            x0,
            correlation,
        })
    }

    pub fn dim(&self) -> usize {
        self.vols.len()
    }

    /// Model restricted to the leading `k` components.
    pub fn leading(&self, k: usize) -> Result<Self, SimulationError> {
        Self::new(
            self.rate,
            self.vols[..k].to_vec(),
            self.x0[..k].to_vec(),
            self.correlation.leading(k)?,
        )
    }

    pub fn diffusion(&self, i: usize, x: f64) -> f64 {
        self.vols[i] * x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_reconstructs_matrix_and_inverse_is_inverse() {
        let rows = vec![vec![1.0, 0.9, 0.2], vec![0.9, 1.0, 0.4], vec![0.2, 0.4, 1.0]];
        let c = Correlation::new(&rows).unwrap();
        let l = c.lower();
        for i in 0..3 {
            for j in 0..3 {
                let llt: f64 = (0..3).map(|k| l[i * 3 + k] * l[j * 3 + k]).sum();
                assert!((llt - rows[i][j]).abs() < 1e-14);
                let prod: f64 = (0..3).map(|k| rows[i][k] * c.inverse()[k * 3 + j]).sum();
                assert!((prod - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn indefinite_or_malformed_rejected() {
        let bad = vec![vec![1.0, 1.2], vec![1.2, 1.0]];
        assert!(matches!(
            Correlation::new(&bad),
            Err(SimulationError::NotPositiveDefinite)
        ));
        assert!(Correlation::new(&[vec![1.0, 0.1], vec![0.2, 1.0]]).is_err());
        assert!(Correlation::new(&[vec![2.0]]).is_err());
    }

    #[test]
    fn grid_indexing() {
        let g = TimeGrid::new(1.0, 200).unwrap();
        assert_eq!(g.index_of(0.7), Some(140));
        assert_eq!(g.index_of(0.7001), None);
        assert!(TimeGrid::new(1.0, 0).is_err());
    }
}
