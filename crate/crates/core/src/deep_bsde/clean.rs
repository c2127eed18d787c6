use std::collections::HashMap;

use crate::autodiff::{AdamState, BoundMlp, Container, Graph, MlpArch, MlpParams, NodeId, Tensor};
use crate::portfolio::{ContractSpec, Portfolio};
use crate::stochastic::{derive_seed, sample_increments, simulate, DriftTilt, MarketModel, PathBatch, TimeGrid};

use super::{gathered_increments, time_state_inputs, BsdeError, TrainConfig, TrainingCurve};

const KIND: &str = "clean-value";
const EVAL_CHUNK: usize = 1024;
const CACHE_BYTES: usize = 1 << 30;

/// Initial values per contract and the shared hedge network mapping
/// `(t / T, x)` to the stacked per-contract hedge coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanModel {
    pub v0: Vec<f64>,
    pub net: MlpParams,
    pub grid: TimeGrid,
    pub contracts: Vec<ContractSpec>,
}

impl CleanModel {
    pub fn underlyings(&self) -> usize {
        self.net.arch.input - 1
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "arch": self.net.arch,
            "grid": self.grid,
            "contracts": self.contracts,
        });
        let mut c = Container::new(KIND, meta);
        c.push("v0", Tensor::row(self.v0.clone()));
        self.net.write_arrays(&mut c, "net");
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, BsdeError> {
        c.expect_kind(KIND)?;
        let field = |k: &str| {
            c.meta
                .get(k)
                .cloned()
                .ok_or_else(|| BsdeError::Config(format!("model metadata lacks `{k}`")))
        };
        let arch: MlpArch = serde_json::from_value(field("arch")?).map_err(|e| BsdeError::Config(e.to_string()))?;
        let grid: TimeGrid = serde_json::from_value(field("grid")?).map_err(|e| BsdeError::Config(e.to_string()))?;
        let contracts: Vec<ContractSpec> =
            serde_json::from_value(field("contracts")?).map_err(|e| BsdeError::Config(e.to_string()))?;
        Ok(Self {
            v0: c.get("v0")?.data().to_vec(),
            net: MlpParams::read_arrays(c, "net", arch)?,
            grid,
            contracts,
        })
    }

    fn check_portfolio(&self, portfolio: &Portfolio) -> Result<(), BsdeError> {
        if self.contracts != portfolio.specs() {
            return Err(BsdeError::Config(
                "clean model was trained on a different portfolio".into(),
            ));
        }
        Ok(())
    }
}

/// Constant tensors for one batch of paths.
struct CleanBatch {
    inputs: Tensor,
    increments: Tensor,
    payoffs: Tensor,
}

impl CleanBatch {
    fn new(batch: &PathBatch, portfolio: &Portfolio, grid: &TimeGrid) -> Result<Self, BsdeError> {
        let d = portfolio.underlyings;
        let p = portfolio.len();
        let mut payoffs = Vec::with_capacity(batch.n_paths * p);
        for path in 0..batch.n_paths {
            for c in &portfolio.contracts {
                payoffs.push(c.payoff(batch.state(path, c.maturity_index))?);
            }
        }
        Ok(Self {
            inputs: time_state_inputs(batch, d, grid.maturity, grid.h()),
            increments: gathered_increments(batch, &portfolio.column_assets()),
            payoffs: Tensor::new([batch.n_paths, p], payoffs)?,
        })
    }

    fn bytes(&self) -> usize {
        8 * (self.inputs.len() + self.increments.len() + self.payoffs.len())
    }
}

/// Clean value recursion `V_{n+1} = V_n + 1{n < N_j} (r h V_n + Z_n . dW_n)`,
/// returning the value node of every grid step (each `[B, P]`).
fn clean_recursion(
    g: &mut Graph,
    v0: NodeId,
    net: &BoundMlp,
    batch: &CleanBatch,
    portfolio: &Portfolio,
    rate: f64,
    grid: &TimeGrid,
) -> Result<Vec<NodeId>, BsdeError> {
    let b = batch.payoffs.rows();
    let p = portfolio.len();
    let h = grid.h();
    let x = g.constant(batch.inputs.clone());
    let z = net.forward(g, x)?;
    let dw = g.constant(batch.increments.clone());
    let zdw_all = g.mul(z, dw)?;
    let zdw = g.block_sum(zdw_all, portfolio.block_widths())?;
    let mut v = g.broadcast_rows(v0, b)?;
    let mut values = Vec::with_capacity(grid.steps + 1);
    values.push(v);
    let mut mask_cache: HashMap<Vec<bool>, NodeId> = HashMap::new();
    for n in 0..grid.steps {
        let alive: Vec<bool> = portfolio.contracts.iter().map(|c| n < c.maturity_index).collect();
        if alive.iter().all(|a| !a) {
            values.push(v);
            continue;
        }
        let step = g.slice_rows(zdw, n * b, (n + 1) * b)?;
        let growth = g.scale(v, rate * h)?;
        let mut inc = g.add(growth, step)?;
        if alive.iter().any(|a| !a) {
            let mask = match mask_cache.get(&alive) {
                Some(&m) => m,
                None => {
                    let row: Vec<f64> = alive.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
                    let data = row.iter().copied().cycle().take(b * p).collect();
                    let m = g.constant(Tensor::new([b, p], data)?);
                    mask_cache.insert(alive.clone(), m);
                    m
                }
            };
            inc = g.mul(inc, mask)?;
        }
        v = g.add(v, inc)?;
        values.push(v);
    }
    Ok(values)
}

/// Trains the layer-1 solver on a pool of untilted paths of the first `d`
/// components of `market`.
pub fn train_clean(
    market: &MarketModel,
    grid: &TimeGrid,
    portfolio: &Portfolio,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(CleanModel, TrainingCurve), BsdeError> {
    cfg.validate()?;
    let d = portfolio.underlyings;
    if market.dim() < d {
        return Err(BsdeError::Config(format!(
            "market has {} components, portfolio needs {d}",
            market.dim()
        )));
    }
    let market = market.leading(d)?;
    let pool_seed = derive_seed(seed, "clean/pool");
    let arch = MlpArch::new(1 + d, cfg.hidden.clone(), portfolio.total_width());
    let mut model = CleanModel {
        v0: vec![0.0; portfolio.len()],
        net: MlpParams::init(arch, derive_seed(seed, "clean/init")),
        grid: *grid,
        contracts: portfolio.specs(),
    };
    let b = cfg.batch_size;
    let make_batch = |k: usize| -> Result<CleanBatch, BsdeError> {
        let inc = sample_increments(pool_seed, (k * b) as u64, b, grid, &market.correlation);
        let paths = simulate(&market, &DriftTilt::zero(d), &inc, grid)?;
        CleanBatch::new(&paths, portfolio, grid)
    };
    let first = make_batch(0)?;
    let cache_ok = first.bytes() * cfg.batches_per_epoch() <= CACHE_BYTES;
    let mut cache: Vec<Option<CleanBatch>> = (0..cfg.batches_per_epoch()).map(|_| None).collect();
    cache[0] = Some(first);

    let mut adam = {
        let mut params = vec![Tensor::row(model.v0.clone())];
        params.extend(model.net.tensors().into_iter().cloned());
        AdamState::new(&params.iter().collect::<Vec<_>>(), cfg.adam)
    };
    let mut curve = TrainingCurve::default();
    let total = cfg.iterations();
    for it in 0..total {
        let k = it % cfg.batches_per_epoch();
        if cache[k].is_none() {
            cache[k] = Some(make_batch(k)?);
        }
        let batch = cache[k].as_ref().expect("batch prepared");
        let mut g = Graph::new();
        let v0 = g.parameter(Tensor::row(model.v0.clone()));
        let net = model.net.bind(&mut g, true);
        let values = clean_recursion(&mut g, v0, &net, batch, portfolio, market.rate, grid)?;
        let terminal = *values.last().expect("at least one step");
        let target = g.constant(batch.payoffs.clone());
        let diff = g.sub(terminal, target)?;
        let sq = g.square(diff)?;
        let sum = g.sum(sq)?;
        let loss = g.scale(sum, 1.0 / b as f64)?;
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(BsdeError::Diverged(format!("clean loss at iteration {it}")));
        }
        let mut grads = g.backward(loss)?;
        let mut grad_list = vec![grads.take(v0)];
        grad_list.extend(net.nodes().into_iter().map(|id| grads.take(id)));
        drop(g);
        let mut v0_t = Tensor::row(std::mem::take(&mut model.v0));
        {
            let mut params: Vec<&mut Tensor> = vec![&mut v0_t];
            params.extend(model.net.tensors_mut());
            adam.update(&mut params, &grad_list, cfg.lr.rate(it, total))?;
        }
        model.v0 = v0_t.into_data();
        curve.push(it, "loss", loss_value);
        curve.push(it, "v0_total", model.v0.iter().sum::<f64>());
        if !cache_ok {
            cache[k] = None;
        }
    }
    Ok((model, curve))
}

/// Values along paths, each contract frozen at its maturity value afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanPaths {
    pub n_paths: usize,
    pub steps: usize,
    pub contracts: usize,
    pub maturities: Vec<usize>,
    /// `[path][step 0..=N][contract]`
    pub frozen: Vec<f64>,
}

impl CleanPaths {
    pub fn frozen(&self, path: usize, n: usize, j: usize) -> f64 {
        self.frozen[(path * (self.steps + 1) + n) * self.contracts + j]
    }

    /// Value of contract `j` while it is live (including its maturity node), zero afterwards.
    pub fn live(&self, path: usize, n: usize, j: usize) -> f64 {
        if n <= self.maturities[j] {
            self.frozen(path, n, j)
        } else {
            0.0
        }
    }

    pub fn portfolio_live(&self, path: usize, n: usize) -> f64 {
        (0..self.contracts).map(|j| self.live(path, n, j)).sum()
    }

    pub fn portfolio_frozen(&self, path: usize, n: usize) -> f64 {
        (0..self.contracts).map(|j| self.frozen(path, n, j)).sum()
    }
}

/// Runs the trained recursion along given paths (first `d` components are
/// used) without recording gradients.
pub fn clean_value_paths(
    model: &CleanModel,
    paths: &PathBatch,
    portfolio: &Portfolio,
    rate: f64,
) -> Result<CleanPaths, BsdeError> {
    model.check_portfolio(portfolio)?;
    let grid = model.grid;
    if paths.steps != grid.steps || paths.dim < portfolio.underlyings {
        return Err(BsdeError::Config(format!(
            "paths [{} steps, dim {}] incompatible with model grid of {} steps over {} underlyings",
            paths.steps, paths.dim, grid.steps, portfolio.underlyings
        )));
    }
    let p = portfolio.len();
    let stride = (grid.steps + 1) * p;
    let mut frozen = vec![0.0; paths.n_paths * stride];
    let mut start = 0;
    while start < paths.n_paths {
        let end = (start + EVAL_CHUNK).min(paths.n_paths);
        let chunk = paths.slice(start, end);
        let batch = CleanBatch::new(&chunk, portfolio, &grid)?;
        let mut g = Graph::new();
        let v0 = g.constant(Tensor::row(model.v0.clone()));
        let net = model.net.bind(&mut g, false);
        let values = clean_recursion(&mut g, v0, &net, &batch, portfolio, rate, &grid)?;
        for (n, id) in values.iter().enumerate() {
            let v = g.value(*id);
            for b in 0..(end - start) {
                let o = (start + b) * stride + n * p;
                frozen[o..o + p].copy_from_slice(v.row_slice(b));
            }
        }
        start = end;
    }
    Ok(CleanPaths {
        n_paths: paths.n_paths,
        steps: grid.steps,
        contracts: p,
        maturities: portfolio.contracts.iter().map(|c| c.maturity_index).collect(),
        frozen,
    })
}
