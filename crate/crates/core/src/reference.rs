//! Nested Monte Carlo reference values along chosen outer paths, with the
//! trained lower layers taken as given, and empirical convergence studies.

use serde::{Deserialize, Serialize};

use crate::deep_bsde::{
    adjustments_along, clean_value_paths, train_linear, AdjustmentKind, AdjustmentModel, BsdeError, CleanModel,
    FundingModel, LinearProblem, LowerLayers, TiltPair, TrainConfig,
};
use crate::initial_margin::{empirical_quantile, ImError, RiskMeasure};
use crate::portfolio::{call_value, collateral, norm_cdf, total_adjustment, Portfolio, PortfolioError};
use crate::stochastic::{
    derive_seed, sample_increments, simulate, Correlation, DriftTilt, Increments, MarketModel, Party, PathBatch,
    SimulationError, TimeGrid,
};

#[derive(Debug, thiserror::Error)]
pub enum ReferenceError {
    #[error("invalid reference setup: {0}")]
    Config(String),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Bsde(#[from] BsdeError),
    #[error(transparent)]
    Margin(#[from] ImError),
    #[error(transparent)]
    Portfolio(#[from] PortfolioError),
}

/// Inner simulation sizes. Inner grids refine the outer grid by `refinement`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSpec {
    pub refinement: usize,
    pub inner_paths: usize,
    pub quantile_paths: usize,
}

const MIN_INNER: usize = 1000;

impl ReferenceSpec {
    pub fn validate(&self) -> Result<(), ReferenceError> {
        if self.refinement == 0 || self.inner_paths < MIN_INNER || self.quantile_paths < MIN_INNER {
            return Err(ReferenceError::Config(format!(
                "need refinement >= 1 and at least {MIN_INNER} inner and quantile paths"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceValue {
    pub value: f64,
    pub se: f64,
    pub inner_paths: usize,
    pub inner_steps: usize,
    pub h_ref: f64,
}

pub fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let m = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / m;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Standard error of the lower order statistic from the spread of the order
/// statistics one binomial standard deviation either side of it.
pub fn quantile_standard_error(samples: &[f64], alpha: f64) -> f64 {
    let m = samples.len();
    if m < 2 {
        return 0.0;
    }
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let k = ((alpha * m as f64).ceil() as usize).clamp(1, m) - 1;
    let j = ((m as f64 * alpha * (1.0 - alpha)).sqrt().ceil() as usize).max(1);
    let hi = s[(k + j).min(m - 1)];
    let lo = s[k.saturating_sub(j)];
    0.5 * (hi - lo)
}

/// Inner paths from state `x` at outer step `n0`, on a grid `refinement`
/// times finer covering the next `outer_steps` outer steps.
fn fine_continuation(
    market: &MarketModel,
    grid: &TimeGrid,
    n0: usize,
    x: &[f64],
    outer_steps: usize,
    refinement: usize,
    n_paths: usize,
    seed: u64,
) -> Result<(PathBatch, TimeGrid), ReferenceError> {
    if outer_steps == 0 || n0 + outer_steps > grid.steps {
        return Err(ReferenceError::Config(format!(
            "cannot continue {outer_steps} steps from step {n0} of {}",
            grid.steps
        )));
    }
    let start = MarketModel::new(market.rate, market.vols.clone(), x.to_vec(), market.correlation.clone())?;
    let fine = TimeGrid::new(outer_steps as f64 * grid.h(), outer_steps * refinement)?;
    let inc = sample_increments(seed, 0, n_paths, &fine, &start.correlation);
    let paths = simulate(&start, &DriftTilt::zero(start.dim()), &inc, &fine)?;
    Ok((paths, fine))
}

/// Full-length outer-grid batch: the outer path's history up to `n0`, then the
/// inner paths sampled at outer points, held flat after the continuation ends.
fn spliced_batch(outer: &PathBatch, path: usize, n0: usize, fine: &PathBatch, refinement: usize) -> PathBatch {
    let (steps, dim, m) = (outer.steps, outer.dim, fine.n_paths);
    let covered = fine.steps / refinement;
    let mut states = Vec::with_capacity(m * (steps + 1) * dim);
    let mut incs = vec![0.0; m * steps * dim];
    for i in 0..m {
        for n in 0..=steps {
            if n <= n0 {
                states.extend_from_slice(outer.state(path, n));
            } else {
                let k = (n - n0).min(covered);
                states.extend_from_slice(fine.state(i, k * refinement));
            }
        }
        for n in 0..steps {
            let out = &mut incs[(i * steps + n) * dim..(i * steps + n + 1) * dim];
            if n < n0 {
                out.copy_from_slice(outer.increments.at(path, n));
            } else if n - n0 < covered {
                for f in 0..refinement {
                    for (o, v) in out.iter_mut().zip(fine.increments.at(i, (n - n0) * refinement + f)) {
                        *o += v;
                    }
                }
            }
        }
    }
    PathBatch {
        n_paths: m,
        steps,
        dim,
        states,
        increments: Increments {
            n_paths: m,
            steps,
            dim,
            first_path: 0,
            data: incs,
        },
        tilt: DriftTilt::zero(dim),
    }
}

/// Clean portfolio value at outer step `n0` and underlying state `x`: the
/// discounted payoffs of the contracts still live, averaged over inner paths.
pub fn reference_clean(
    market: &MarketModel,
    portfolio: &Portfolio,
    grid: &TimeGrid,
    n0: usize,
    x: &[f64],
    spec: &ReferenceSpec,
    seed: u64,
) -> Result<ReferenceValue, ReferenceError> {
    spec.validate()?;
    let d = portfolio.underlyings;
    let market = market.leading(d)?;
    let r = spec.refinement;
    let live: Vec<_> = portfolio.contracts.iter().filter(|c| c.maturity_index >= n0).collect();
    let horizon = live.iter().map(|c| c.maturity_index).max().unwrap_or(n0);
    let mut samples = vec![0.0; spec.inner_paths];
    let mut inner_steps = 0;
    if horizon > n0 {
        let (fine, fg) = fine_continuation(&market, grid, n0, &x[..d], horizon - n0, r, spec.inner_paths, seed)?;
        inner_steps = fg.steps;
        for (i, s) in samples.iter_mut().enumerate() {
            for c in &live {
                let k = (c.maturity_index - n0) * r;
                let tau = (c.maturity_index - n0) as f64 * grid.h();
                *s += (-market.rate * tau).exp() * c.payoff(fine.state(i, k))?;
            }
        }
    } else {
        let v: f64 = live.iter().map(|c| c.payoff(&x[..d])).sum::<Result<f64, _>>()?;
        samples.iter_mut().for_each(|s| *s = v);
    }
    let (value, se) = mean_and_se(&samples);
    Ok(ReferenceValue {
        value,
        se,
        inner_paths: spec.inner_paths,
        inner_steps,
        h_ref: grid.h() / r as f64,
    })
}

/// Received and posted margin at outer step `n0` of `outer[path]`: empirical
/// quantiles of the clean value change over the margin period, the clean
/// model supplying values along the inner paths.
pub fn reference_margin(
    market: &MarketModel,
    clean: &CleanModel,
    portfolio: &Portfolio,
    risk: &RiskMeasure,
    outer: &PathBatch,
    path: usize,
    n0: usize,
    spec: &ReferenceSpec,
    seed: u64,
) -> Result<(ReferenceValue, ReferenceValue), ReferenceError> {
    spec.validate()?;
    risk.validate()?;
    let grid = clean.grid;
    let d = portfolio.underlyings;
    if n0 >= grid.steps {
        return Err(ReferenceError::Config("margin vanishes at the horizon".into()));
    }
    let market = market.leading(d)?;
    let k = risk.horizon(n0, grid.steps);
    let r = spec.refinement;
    let history = outer_prefix(outer, path, d);
    let (fine, fg) = fine_continuation(
        &market,
        &grid,
        n0,
        history.state(0, n0),
        k,
        r,
        spec.quantile_paths,
        seed,
    )?;
    let batch = spliced_batch(&history, 0, n0, &fine, r);
    let values = clean_value_paths(clean, &batch, portfolio, market.rate)?;
    let mut plus = Vec::with_capacity(fine.n_paths);
    let mut minus = Vec::with_capacity(fine.n_paths);
    for i in 0..fine.n_paths {
        let dv = values.portfolio_frozen(i, n0 + k) - values.portfolio_frozen(i, n0);
        plus.push(dv.max(0.0));
        minus.push((-dv).max(0.0));
    }
    let wrap = |value: f64, se: f64| ReferenceValue {
        value,
        se,
        inner_paths: spec.quantile_paths,
        inner_steps: fg.steps,
        h_ref: fg.h(),
    };
    Ok((
        wrap(
            empirical_quantile(&plus, risk.alpha)?,
            quantile_standard_error(&plus, risk.alpha),
        ),
        wrap(
            -empirical_quantile(&minus, risk.alpha)?,
            quantile_standard_error(&minus, risk.alpha),
        ),
    ))
}

/// One outer path restricted to its leading `dim` components.
fn outer_prefix(outer: &PathBatch, path: usize, dim: usize) -> PathBatch {
    let single = outer.slice(path, path + 1);
    if dim == single.dim {
        return single;
    }
    let mut states = Vec::with_capacity((single.steps + 1) * dim);
    for n in 0..=single.steps {
        states.extend_from_slice(&single.state(0, n)[..dim]);
    }
    let mut data = Vec::with_capacity(single.steps * dim);
    for n in 0..single.steps {
        data.extend_from_slice(&single.increments.at(0, n)[..dim]);
    }
    PathBatch {
        n_paths: 1,
        steps: single.steps,
        dim,
        states,
        increments: Increments {
            n_paths: 1,
            steps: single.steps,
            dim,
            first_path: single.increments.first_path,
            data,
        },
        tilt: DriftTilt::zero(dim),
    }
}

/// Adjustment value at outer step `n0` of the untilted `outer[path]`.
///
/// Inner paths run on the refined grid, default times are monitored on it, and
/// the lower-layer values (clean value, margins, the other adjustments and,
/// for the funding adjustment, its own trained values) are held at the last
/// outer grid point. Running drivers are integrated left-Riemann and discounted
/// exactly; default-loss kinds pay their close-out at the inner default time.
pub fn reference_adjustment(
    kind: AdjustmentKind,
    lower: &LowerLayers,
    model: &AdjustmentModel,
    funding: Option<&FundingModel>,
    outer: &PathBatch,
    path: usize,
    n0: usize,
    spec: &ReferenceSpec,
    seed: u64,
) -> Result<ReferenceValue, ReferenceError> {
    spec.validate()?;
    let grid = lower.grid;
    let steps = grid.steps;
    if n0 >= steps {
        return Err(ReferenceError::Config("adjustments are terminal at the horizon".into()));
    }
    if kind == AdjustmentKind::Fva && funding.is_none() {
        return Err(ReferenceError::Config(
            "funding reference needs the trained funding layer".into(),
        ));
    }
    if kind != AdjustmentKind::Fva && model.initial(kind).is_none() {
        return Err(ReferenceError::Config(format!("{} was not trained", kind.name())));
    }
    let spec_d = lower.defaults;
    let outer_first = (1..=n0).find(|&n| {
        outer.component(path, n, spec_d.bank_index) <= spec_d.bank_barrier.at(n)
            || outer.component(path, n, spec_d.cpty_index) <= spec_d.cpty_barrier.at(n)
    });
    if let Some(n) = outer_first {
        return Err(ReferenceError::Config(format!(
            "outer path {path} stopped at step {n} before {n0}"
        )));
    }
    let r = spec.refinement;
    let (fine, fg) = fine_continuation(
        lower.market,
        &grid,
        n0,
        outer.state(path, n0),
        steps - n0,
        r,
        spec.inner_paths,
        seed,
    )?;
    let batch = spliced_batch(outer, path, n0, &fine, r);
    let along = adjustments_along(lower, model, funding, TiltPair::default(), &batch)?;
    let rates = lower.rates;
    let hf = fg.h();
    let mf = fg.steps;
    let stride = steps + 1;
    let mut samples = Vec::with_capacity(fine.n_paths);
    for i in 0..fine.n_paths {
        let hit = |idx: usize, barrier: &crate::stochastic::Barrier| {
            (1..=mf).find(|&m| fine.component(i, m, idx) <= barrier.at(n0 + m / r))
        };
        let bank = hit(spec_d.bank_index, &spec_d.bank_barrier).unwrap_or(mf + 1);
        let cpty = hit(spec_d.cpty_index, &spec_d.cpty_barrier).unwrap_or(mf + 1);
        let first = bank.min(cpty);
        let defaulter = if cpty <= mf && cpty <= bank {
            Some(Party::Counterparty)
        } else if bank <= mf && bank < cpty {
            Some(Party::Bank)
        } else {
            None
        };
        let stop = first.min(mf);
        let at = |n: usize| i * stride + n;
        let value = match kind {
            AdjustmentKind::Cva | AdjustmentKind::Dva => {
                let n = n0 + stop / r;
                let v = along.clean[at(n)];
                let c = collateral(v, rates.collateral_fraction);
                let target = if kind == AdjustmentKind::Cva {
                    rates.cva_target(v, c, along.im_fc[at(n)], defaulter)
                } else {
                    rates.dva_target(v, c, along.im_tc[at(n)], defaulter)
                };
                (-rates.risk_free * stop as f64 * hf).exp() * target
            }
            _ => {
                let mut acc = 0.0;
                for m in 0..stop {
                    let n = n0 + m / r;
                    let v = along.clean[at(n)];
                    let c = collateral(v, rates.collateral_fraction);
                    let f = match kind {
                        AdjustmentKind::Colva => rates.colva_driver(c),
                        AdjustmentKind::Mva => rates.mva_driver(along.im_tc[at(n)], along.im_fc[at(n)]),
                        _ => {
                            let get = |k| along.value(k, i, n).unwrap_or(0.0);
                            let tva = total_adjustment(
                                get(AdjustmentKind::Cva),
                                get(AdjustmentKind::Dva),
                                get(AdjustmentKind::Fva),
                                get(AdjustmentKind::Colva),
                                get(AdjustmentKind::Mva),
                            );
                            rates.fva_driver(v, tva, c, along.im_tc[at(n)])
                        }
                    };
                    acc += (-rates.risk_free * m as f64 * hf).exp() * f * hf;
                }
                -acc
            }
        };
        samples.push(value);
    }
    let (value, se) = mean_and_se(&samples);
    Ok(ReferenceValue {
        value,
        se,
        inner_paths: spec.inner_paths,
        inner_steps: mf,
        h_ref: hf,
    })
}

/// Problems with an accurate reference for measuring discretization error.
#[derive(Debug, Clone, PartialEq)]
pub enum StudyProblem {
    /// Strong error of Euler–Maruyama against the exact solution on the same Brownian path.
    GbmStrong {
        rate: f64,
        vol: f64,
        x0: f64,
        maturity: f64,
    },
    /// Discretely monitored down-and-out call against the continuous-barrier closed form.
    DownAndOut {
        rate: f64,
        vol: f64,
        x0: f64,
        strike: f64,
        barrier: f64,
        maturity: f64,
    },
    /// Trained initial value of the linear problem against Black–Scholes.
    DeepBsde {
        problem: LinearProblem,
        maturity: f64,
        train: TrainConfig,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub steps: Vec<usize>,
    /// Mean error across seeds per grid.
    pub errors: Vec<f64>,
    pub per_seed: Vec<Vec<f64>>,
    /// Log-log slope of the mean errors against the step size.
    pub slope: f64,
    /// Smallest and largest per-seed slopes.
    pub slope_band: (f64, f64),
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Closed-form down-and-out call with continuous monitoring, barrier below the strike.
pub fn down_and_out_call(x0: f64, strike: f64, barrier: f64, rate: f64, vol: f64, maturity: f64) -> f64 {
    let plain = call_value(x0, strike, maturity, rate, rate, vol);
    if x0 <= barrier {
        return 0.0;
    }
    let lambda = (rate + 0.5 * vol * vol) / (vol * vol);
    let sd = vol * maturity.sqrt();
    let y = (barrier * barrier / (x0 * strike)).ln() / sd + lambda * sd;
    let ratio = barrier / x0;
    let down_in = x0 * ratio.powf(2.0 * lambda) * norm_cdf(y)
        - strike * (-rate * maturity).exp() * ratio.powf(2.0 * lambda - 2.0) * norm_cdf(y - sd);
    plain - down_in
}

fn study_errors(problem: &StudyProblem, steps: &[usize], seed: u64, paths: usize) -> Result<Vec<f64>, ReferenceError> {
    let finest = *steps.iter().max().expect("non-empty");
    match problem {
        StudyProblem::GbmStrong {
            rate,
            vol,
            x0,
            maturity,
        }
        | StudyProblem::DownAndOut {
            rate,
            vol,
            x0,
            maturity,
            ..
        } => {
            let market = MarketModel::new(*rate, vec![*vol], vec![*x0], Correlation::identity(1))?;
            let fine_grid = TimeGrid::new(*maturity, finest)?;
            let fine = sample_increments(
                derive_seed(seed, "study/increments"),
                0,
                paths,
                &fine_grid,
                &market.correlation,
            );
            let mut errors = Vec::with_capacity(steps.len());
            for &n in steps {
                let grid = TimeGrid::new(*maturity, n)?;
                let inc = fine.coarsen(finest / n)?;
                let batch = simulate(&market, &DriftTilt::zero(1), &inc, &grid)?;
                let err = match problem {
                    StudyProblem::GbmStrong { .. } => {
                        let mut s = 0.0;
                        for p in 0..paths {
                            let w: f64 = (0..n).map(|k| inc.at(p, k)[0]).sum();
                            let exact = x0 * ((rate - 0.5 * vol * vol) * maturity + vol * w).exp();
                            s += (batch.component(p, n, 0) - exact).abs();
                        }
                        s / paths as f64
                    }
                    StudyProblem::DownAndOut { strike, barrier, .. } => {
                        let mut s = 0.0;
                        for p in 0..paths {
                            let alive = (1..=n).all(|k| batch.component(p, k, 0) > *barrier);
                            if alive {
                                s += (batch.component(p, n, 0) - strike).max(0.0);
                            }
                        }
                        let price = (-rate * maturity).exp() * s / paths as f64;
                        (price - down_and_out_call(*x0, *strike, *barrier, *rate, *vol, *maturity)).abs()
                    }
                    StudyProblem::DeepBsde { .. } => unreachable!(),
                };
                errors.push(err);
            }
            Ok(errors)
        }
        StudyProblem::DeepBsde {
            problem,
            maturity,
            train,
        } => {
            let exact = call_value(
                problem.x0,
                problem.strike,
                *maturity,
                problem.rate,
                problem.rate,
                problem.vol,
            );
            steps
                .iter()
                .map(|&n| {
                    let grid = TimeGrid::new(*maturity, n)?;
                    let (fit, _) = train_linear(problem, &grid, 0.0, train, seed)?;
                    Ok((fit.y0 - exact).abs())
                })
                .collect()
        }
    }
}

/// Errors on each grid for each seed and the fitted convergence slope.
pub fn convergence_study(
    problem: &StudyProblem,
    steps: &[usize],
    seeds: &[u64],
    paths: usize,
) -> Result<StudyResult, ReferenceError> {
    if steps.len() < 3 {
        return Err(ReferenceError::Config(
            "a convergence study needs at least three grids".into(),
        ));
    }
    if seeds.is_empty() || paths == 0 {
        return Err(ReferenceError::Config("need at least one seed and one path".into()));
    }
    let finest = *steps.iter().max().expect("non-empty");
    if steps.iter().any(|&n| n == 0 || !finest.is_multiple_of(n)) {
        return Err(ReferenceError::Config("every grid must divide the finest one".into()));
    }
    let maturity = match problem {
        StudyProblem::GbmStrong { maturity, .. }
        | StudyProblem::DownAndOut { maturity, .. }
        | StudyProblem::DeepBsde { maturity, .. } => *maturity,
    };
    let h: Vec<f64> = steps.iter().map(|&n| maturity / n as f64).collect();
    let per_seed = seeds
        .iter()
        .map(|&s| study_errors(problem, steps, s, paths))
        .collect::<Result<Vec<_>, _>>()?;
    let errors: Vec<f64> = (0..steps.len())
        .map(|i| per_seed.iter().map(|e| e[i]).sum::<f64>() / seeds.len() as f64)
        .collect();
    let slopes: Vec<f64> = per_seed.iter().map(|e| loglog_slope(&h, e)).collect();
    Ok(StudyResult {
        steps: steps.to_vec(),
        slope: loglog_slope(&h, &errors),
        slope_band: (
            slopes.iter().copied().fold(f64::INFINITY, f64::min),
            slopes.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ),
        errors,
        per_seed,
    })
}
