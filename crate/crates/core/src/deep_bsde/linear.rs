use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Graph, MlpArch, MlpParams, NodeId, Tensor};
use crate::stochastic::{derive_seed, sample_increments, simulate, Correlation, DriftTilt, MarketModel, TimeGrid};

use super::{gathered_increments, time_state_inputs, BsdeError, TrainConfig, TrainingCurve};

/// One-factor linear BSDE `dY = r Y dt + Z dW`, `Y_T = (X_T - K)^+` over a
/// geometric Brownian motion: its initial value is the Black–Scholes call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearProblem {
    pub rate: f64,
    pub vol: f64,
    pub x0: f64,
    pub strike: f64,
}

impl LinearProblem {
    fn market(&self) -> Result<MarketModel, BsdeError> {
        Ok(MarketModel::new(
            self.rate,
            vec![self.vol],
            vec![self.x0],
            Correlation::identity(1),
        )?)
    }
}

/// Trained initial value with the Monte Carlo standard error implied by the
/// terminal residual spread over the training pool.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub y0: f64,
    pub standard_error: f64,
    pub residual_sd: f64,
}

struct LinearBatch {
    inputs: Tensor,
    increments: Tensor,
    kernel: Option<Tensor>,
    target: Tensor,
}

fn linear_batch(
    problem: &LinearProblem,
    grid: &TimeGrid,
    tilt: f64,
    seed: u64,
    first: usize,
    b: usize,
) -> Result<LinearBatch, BsdeError> {
    let market = problem.market()?;
    let inc = sample_increments(seed, first as u64, b, grid, &market.correlation);
    let drift = DriftTilt::new(vec![tilt]);
    let paths = simulate(&market, &drift, &inc, grid)?;
    let kernel = if tilt == 0.0 {
        None
    } else {
        let mut k = vec![0.0; grid.steps * b];
        for n in 0..grid.steps {
            for p in 0..b {
                drift.kernel(&market, paths.state(p, n), &mut k[n * b + p..n * b + p + 1])?;
            }
        }
        Some(Tensor::new([grid.steps * b, 1], k)?)
    };
    let target = (0..b)
        .map(|p| (paths.component(p, grid.steps, 0) - problem.strike).max(0.0))
        .collect();
    Ok(LinearBatch {
        inputs: time_state_inputs(&paths, 1, grid.maturity, grid.h()),
        increments: gathered_increments(&paths, &[0]),
        kernel,
        target: Tensor::new([b, 1], target)?,
    })
}

/// `Y_{n+1} = Y_n + (r Y_n - CM_n) h + Z_n dW_n`; returns the terminal residual node.
fn residual(
    g: &mut Graph,
    y0: NodeId,
    z: NodeId,
    batch: &LinearBatch,
    rate: f64,
    grid: &TimeGrid,
) -> Result<NodeId, BsdeError> {
    let b = batch.target.rows();
    let h = grid.h();
    let dw = g.constant(batch.increments.clone());
    let zdw = g.mul(z, dw)?;
    let cm = match &batch.kernel {
        Some(k) => {
            let kn = g.constant(k.clone());
            Some(g.mul(z, kn)?)
        }
        None => None,
    };
    let mut y = g.broadcast_rows(y0, b)?;
    for n in 0..grid.steps {
        let growth = g.scale(y, rate * h)?;
        let step = g.slice_rows(zdw, n * b, (n + 1) * b)?;
        let mut inc = g.add(growth, step)?;
        if let Some(c) = cm {
            let cn = g.slice_rows(c, n * b, (n + 1) * b)?;
            let ch = g.scale(cn, h)?;
            inc = g.sub(inc, ch)?;
        }
        y = g.add(y, inc)?;
    }
    let target = g.constant(batch.target.clone());
    Ok(g.sub(y, target)?)
}

/// Trains the one-factor problem on paths whose drift is shifted by `-tilt`,
/// with the compensator correcting the dynamics back to the original measure.
pub fn train_linear(
    problem: &LinearProblem,
    grid: &TimeGrid,
    tilt: f64,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(LinearFit, TrainingCurve), BsdeError> {
    cfg.validate()?;
    let pool = derive_seed(seed, "linear/pool");
    let b = cfg.batch_size;
    let batches = (0..cfg.batches_per_epoch())
        .map(|k| linear_batch(problem, grid, tilt, pool, k * b, b))
        .collect::<Result<Vec<_>, _>>()?;
    let mut y0 = problem.x0.max(problem.strike) - problem.strike;
    let mut net = MlpParams::init(MlpArch::new(2, cfg.hidden.clone(), 1), derive_seed(seed, "linear/init"));
    let mut adam = {
        let init = Tensor::scalar(y0);
        let mut params = vec![&init];
        params.extend(net.tensors());
        AdamState::new(&params, cfg.adam)
    };
    let mut curve = TrainingCurve::default();
    let total = cfg.iterations();
    for it in 0..total {
        let batch = &batches[it % batches.len()];
        let mut g = Graph::new();
        let y0n = g.parameter(Tensor::scalar(y0));
        let bound = net.bind(&mut g, true);
        let x = g.constant(batch.inputs.clone());
        let z = bound.forward(&mut g, x)?;
        let res = residual(&mut g, y0n, z, batch, problem.rate, grid)?;
        let sq = g.square(res)?;
        let loss = g.mean(sq)?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(BsdeError::Diverged(format!("linear loss at iteration {it}")));
        }
        let mut grads = g.backward(loss)?;
        let mut gl = vec![grads.take(y0n)];
        gl.extend(bound.nodes().into_iter().map(|id| grads.take(id)));
        drop(g);
        let mut y0t = Tensor::scalar(y0);
        {
            let mut params: Vec<&mut Tensor> = vec![&mut y0t];
            params.extend(net.tensors_mut());
            adam.update(&mut params, &gl, cfg.lr.rate(it, total))?;
        }
        y0 = y0t.item();
        curve.push(it, "loss", lv);
        curve.push(it, "y0", y0);
    }
    let mut residuals = Vec::with_capacity(cfg.samples);
    for batch in &batches {
        let mut g = Graph::new();
        let y0n = g.constant(Tensor::scalar(y0));
        let bound = net.bind(&mut g, false);
        let x = g.constant(batch.inputs.clone());
        let z = bound.forward(&mut g, x)?;
        let res = residual(&mut g, y0n, z, batch, problem.rate, grid)?;
        residuals.extend_from_slice(g.value(res).data());
    }
    let m = residuals.len() as f64;
    let mean = residuals.iter().sum::<f64>() / m;
    let sd = (residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
    let discount = (1.0 + problem.rate * grid.h()).powi(grid.steps as i32);
    Ok((
        LinearFit {
            y0,
            standard_error: sd / discount / m.sqrt(),
            residual_sd: sd,
        },
        curve,
    ))
}
