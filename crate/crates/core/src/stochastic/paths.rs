use rayon::prelude::*;

use super::model::{Correlation, MarketModel, TimeGrid};
use super::rng::NormalStream;
use super::SimulationError;

/// Correlated Brownian increments `dW = L sqrt(h) z`, path-major `[path][step][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Increments {
    pub n_paths: usize,
    pub steps: usize,
    pub dim: usize,
    pub first_path: u64,
    pub data: Vec<f64>,
}

impl Increments {
    pub fn at(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.steps + step) * self.dim;
        &self.data[o..o + self.dim]
    }

    /// Sums of `factor` consecutive increments: the same Brownian path on a grid
    /// `factor` times coarser.
    pub fn coarsen(&self, factor: usize) -> Result<Self, SimulationError> {
        if factor == 0 || !self.steps.is_multiple_of(factor) {
            return Err(SimulationError::Config(format!(
                "cannot coarsen {} steps by {factor}",
                self.steps
            )));
        }
        let steps = self.steps / factor;
        let mut data = vec![0.0; self.n_paths * steps * self.dim];
        for p in 0..self.n_paths {
            for s in 0..steps {
                let out = &mut data[(p * steps + s) * self.dim..(p * steps + s + 1) * self.dim];
                for f in 0..factor {
                    for (o, v) in out.iter_mut().zip(self.at(p, s * factor + f)) {
                        *o += v;
                    }
                }
            }
        }
        Ok(Self {
            n_paths: self.n_paths,
            steps,
            dim: self.dim,
            first_path: self.first_path,
            data,
        })
    }
}

/// Draws increments for global path ids `first_path .. first_path + n_paths`.
pub fn sample_increments(
    seed: u64,
    first_path: u64,
    n_paths: usize,
    grid: &TimeGrid,
    corr: &Correlation,
) -> Increments {
    let dim = corr.dim();
    let steps = grid.steps;
    let sqrt_h = grid.h().sqrt();
    let stream = NormalStream::new(seed, dim);
    let mut data = vec![0.0; n_paths * steps * dim];
    data.par_chunks_mut((steps * dim).max(1))
        .enumerate()
        .for_each(|(p, chunk)| {
            let mut z = vec![0.0; steps * dim];
            stream.fill_path(first_path + p as u64, &mut z);
            for (zs, out) in z.chunks(dim).zip(chunk.chunks_mut(dim)) {
                corr.correlate(zs, out);
                out.iter_mut().for_each(|v| *v *= sqrt_h);
            }
        });
    Increments {
        n_paths,
        steps,
        dim,
        first_path,
        data,
    }
}

/// Constant drift shift: the tilted dynamics use drift `b - q`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftTilt {
    pub q: Vec<f64>,
}

impl DriftTilt {
    pub fn zero(dim: usize) -> Self {
        Self { q: vec![0.0; dim] }
    }

    pub fn new(q: Vec<f64>) -> Self {
        Self { q }
    }

    pub fn is_zero(&self) -> bool {
        self.q.iter().all(|&v| v == 0.0)
    }

    /// Kernel `q / sigma(x)` at state `x`.
    pub fn kernel(&self, model: &MarketModel, x: &[f64], out: &mut [f64]) -> Result<(), SimulationError> {
        for i in 0..self.q.len() {
            out[i] = if self.q[i] == 0.0 {
                0.0
            } else {
                let s = model.diffusion(i, x[i]);
                if !(s > 0.0) {
                    return Err(SimulationError::DegenerateDiffusion {
                        component: i,
                        value: x[i],
                    });
                }
                self.q[i] / s
            };
        }
        Ok(())
    }
}

/// Simulated states `[path][step 0..=N][dim]` together with their driving increments.
#[derive(Debug, Clone)]
pub struct PathBatch {
    pub n_paths: usize,
    pub steps: usize,
    pub dim: usize,
    pub states: Vec<f64>,
    pub increments: Increments,
    pub tilt: DriftTilt,
}

impl PathBatch {
    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * (self.steps + 1) + step) * self.dim;
        &self.states[o..o + self.dim]
    }

    pub fn component(&self, path: usize, step: usize, i: usize) -> f64 {
        self.states[(path * (self.steps + 1) + step) * self.dim + i]
    }

    /// Paths `start..end` as a standalone batch.
    pub fn slice(&self, start: usize, end: usize) -> PathBatch {
        let sw = (self.steps + 1) * self.dim;
        let iw = self.steps * self.dim;
        PathBatch {
            n_paths: end - start,
            steps: self.steps,
            dim: self.dim,
            states: self.states[start * sw..end * sw].to_vec(),
            increments: Increments {
                n_paths: end - start,
                steps: self.steps,
                dim: self.dim,
                first_path: self.increments.first_path + start as u64,
                data: self.increments.data[start * iw..end * iw].to_vec(),
            },
            tilt: self.tilt.clone(),
        }
    }
}

/// Euler–Maruyama for the (possibly tilted) model on the given increments.
pub fn simulate(
    model: &MarketModel,
    tilt: &DriftTilt,
    increments: &Increments,
    grid: &TimeGrid,
) -> Result<PathBatch, SimulationError> {
    let dim = model.dim();
    if increments.dim != dim || tilt.q.len() != dim || increments.steps != grid.steps {
        return Err(SimulationError::Config(format!(
            "model dim {dim}, tilt dim {}, increments [{} steps, dim {}], grid {} steps",
            tilt.q.len(),
            increments.steps,
            increments.dim,
            grid.steps
        )));
    }
    let steps = grid.steps;
    let h = grid.h();
    let mut states = vec![0.0; increments.n_paths * (steps + 1) * dim];
    let failed = std::sync::atomic::AtomicBool::new(false);
    states
        .par_chunks_mut((steps + 1) * dim)
        .enumerate()
        .for_each(|(p, xs)| {
            xs[..dim].copy_from_slice(&model.x0);
            for n in 0..steps {
                let dw = increments.at(p, n);
                for i in 0..dim {
                    let x = xs[n * dim + i];
                    let next = x + (model.rate * x - tilt.q[i]) * h + model.diffusion(i, x) * dw[i];
                    if !next.is_finite() {
                        failed.store(true, std::sync::atomic::Ordering::Relaxed);
                    }
                    xs[(n + 1) * dim + i] = next;
                }
            }
        });
    if failed.into_inner() {
        return Err(SimulationError::NonFinite);
    }
    Ok(PathBatch {
        n_paths: increments.n_paths,
        steps,
        dim,
        states,
        increments: increments.clone(),
        tilt: tilt.clone(),
    })
}
