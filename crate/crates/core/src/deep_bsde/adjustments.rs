use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, BoundMlp, Container, Graph, MlpArch, MlpParams, NodeId, Tensor};
use crate::initial_margin::ImModel;
use crate::portfolio::{collateral, AdjustmentRates, Portfolio};
use crate::stochastic::{
    derive_seed, detect_defaults, sample_increments, simulate, DefaultSpec, DriftTilt, Increments, MarketModel, Party,
    PathBatch, TimeGrid,
};

use super::{
    clean_value_paths, gathered_increments, time_state_inputs, BsdeError, CleanModel, TrainConfig, TrainingCurve,
};

const EVAL_CHUNK: usize = 1024;
const CACHE_BYTES: usize = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjustmentKind {
    Colva,
    Cva,
    Dva,
    Mva,
    Fva,
}

impl AdjustmentKind {
    /// Adjustments solved jointly in the third layer.
    pub const LOWER: [AdjustmentKind; 4] = [Self::Colva, Self::Cva, Self::Dva, Self::Mva];

    pub fn name(self) -> &'static str {
        match self {
            Self::Colva => "colva",
            Self::Cva => "cva",
            Self::Dva => "dva",
            Self::Mva => "mva",
            Self::Fva => "fva",
        }
    }

    /// Default-loss adjustments grow at the short rate and carry a close-out target;
    /// the others accumulate a running driver and end at zero.
    fn is_default_loss(self) -> bool {
        matches!(self, Self::Cva | Self::Dva)
    }
}

/// Drift shift applied to the (bank, counterparty) default drivers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TiltPair {
    pub bank: f64,
    pub cpty: f64,
}

impl TiltPair {
    pub fn is_zero(&self) -> bool {
        self.bank == 0.0 && self.cpty == 0.0
    }

    pub fn drift_tilt(&self, dim: usize, defaults: &DefaultSpec) -> DriftTilt {
        let mut q = vec![0.0; dim];
        q[defaults.bank_index] = self.bank;
        q[defaults.cpty_index] = self.cpty;
        DriftTilt::new(q)
    }
}

/// Tilted measure used alongside the original one for each adjustment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasureSet {
    pub colva: TiltPair,
    pub cva: TiltPair,
    pub dva: TiltPair,
    pub mva: TiltPair,
    pub fva: TiltPair,
}

impl MeasureSet {
    pub fn get(&self, kind: AdjustmentKind) -> TiltPair {
        match kind {
            AdjustmentKind::Colva => self.colva,
            AdjustmentKind::Cva => self.cva,
            AdjustmentKind::Dva => self.dva,
            AdjustmentKind::Mva => self.mva,
            AdjustmentKind::Fva => self.fva,
        }
    }

    /// The original measure followed by the tilted one, when distinct.
    pub fn measures(&self, kind: AdjustmentKind) -> Vec<TiltPair> {
        let q = self.get(kind);
        if q.is_zero() {
            vec![TiltPair::default()]
        } else {
            vec![TiltPair::default(), q]
        }
    }
}

/// Whether the third-layer adjustments share one hedge network or get one each.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerMode {
    #[default]
    Split,
    Joint,
}

/// Trained lower layers and the contractual setup they feed into the adjustments.
#[derive(Debug, Clone, Copy)]
pub struct LowerLayers<'a> {
    /// Full model: underlyings followed by the bank and counterparty default drivers.
    pub market: &'a MarketModel,
    pub grid: TimeGrid,
    pub portfolio: &'a Portfolio,
    pub clean: &'a CleanModel,
    /// Without a margin model both margins are zero.
    pub margin: Option<&'a ImModel>,
    pub defaults: &'a DefaultSpec,
    pub rates: &'a AdjustmentRates,
}

/// Everything one measure contributes to a batch: network inputs, increments,
/// compensator kernels, drivers and close-out targets, rows ordered step-major.
#[derive(Debug, Clone)]
pub struct PreparedMeasure {
    pub tilt: TiltPair,
    pub n_paths: usize,
    pub steps: usize,
    pub stop: Vec<usize>,
    pub defaulter: Vec<Option<Party>>,
    /// `[path][step 0..=N]`
    pub clean: Vec<f64>,
    pub im_fc: Vec<f64>,
    pub im_tc: Vec<f64>,
    inputs: Tensor,
    increments: Tensor,
    kernel: Option<Tensor>,
    alive: Tensor,
    colva_driver: Tensor,
    mva_driver: Tensor,
    funding_base: Tensor,
    cva_target: Tensor,
    dva_target: Tensor,
    last_stop: usize,
}

impl PreparedMeasure {
    fn bytes(&self) -> usize {
        let t = [
            &self.inputs,
            &self.increments,
            &self.alive,
            &self.colva_driver,
            &self.mva_driver,
            &self.funding_base,
        ];
        8 * (t.iter().map(|x| x.len()).sum::<usize>()
            + self.kernel.as_ref().map_or(0, |k| k.len())
            + 3 * self.clean.len())
    }

    pub fn target(&self, kind: AdjustmentKind, path: usize) -> f64 {
        match kind {
            AdjustmentKind::Cva => self.cva_target.data()[path],
            AdjustmentKind::Dva => self.dva_target.data()[path],
            _ => 0.0,
        }
    }
}

/// Simulates `increments` under `tilt` and evaluates the lower layers along the paths.
pub fn prepare_measure(
    lower: &LowerLayers,
    tilt: TiltPair,
    increments: &Increments,
) -> Result<PreparedMeasure, BsdeError> {
    let market = lower.market;
    let grid = lower.grid;
    let dim = market.dim();
    let drift = tilt.drift_tilt(dim, lower.defaults);
    let paths = simulate(market, &drift, increments, &grid)?;
    prepare_paths(lower, tilt, &paths)
}

fn prepare_paths(lower: &LowerLayers, tilt: TiltPair, paths: &PathBatch) -> Result<PreparedMeasure, BsdeError> {
    let market = lower.market;
    let grid = lower.grid;
    let rates = lower.rates;
    let (b, steps, dim) = (paths.n_paths, paths.steps, paths.dim);
    let defaults = detect_defaults(paths, lower.defaults, &grid)?;
    let clean_paths = clean_value_paths(lower.clean, paths, lower.portfolio, market.rate)?;
    let (im_fc, im_tc) = match lower.margin {
        Some(m) => m.margin_paths(&clean_paths, paths)?,
        None => (vec![0.0; b * (steps + 1)], vec![0.0; b * (steps + 1)]),
    };
    let mut clean = vec![0.0; b * (steps + 1)];
    for p in 0..b {
        for n in 0..=steps {
            clean[p * (steps + 1) + n] = clean_paths.portfolio_live(p, n);
        }
    }
    let stop: Vec<usize> = (0..b).map(|p| defaults.stop(p)).collect();
    let defaulter: Vec<Option<Party>> = (0..b).map(|p| defaults.first_defaulter(p)).collect();

    let rows = steps * b;
    let mut alive = vec![0.0; rows];
    let mut colva = vec![0.0; rows];
    let mut mva = vec![0.0; rows];
    let mut base = vec![0.0; rows];
    let mut kernel = if tilt.is_zero() {
        None
    } else {
        Some(vec![0.0; rows * dim])
    };
    let drift = tilt.drift_tilt(dim, lower.defaults);
    for n in 0..steps {
        for p in 0..b {
            let r = n * b + p;
            let o = p * (steps + 1) + n;
            let c = collateral(clean[o], rates.collateral_fraction);
            alive[r] = if n < stop[p] { 1.0 } else { 0.0 };
            colva[r] = rates.colva_driver(c);
            mva[r] = rates.mva_driver(im_tc[o], im_fc[o]);
            base[r] = clean[o] - c - im_tc[o];
            if let Some(k) = kernel.as_mut() {
                if n < stop[p] {
                    drift.kernel(market, paths.state(p, n), &mut k[r * dim..(r + 1) * dim])?;
                }
            }
        }
    }
    let mut cva_t = vec![0.0; b];
    let mut dva_t = vec![0.0; b];
    for p in 0..b {
        let o = p * (steps + 1) + stop[p];
        let c = collateral(clean[o], rates.collateral_fraction);
        cva_t[p] = rates.cva_target(clean[o], c, im_fc[o], defaulter[p]);
        dva_t[p] = rates.dva_target(clean[o], c, im_tc[o], defaulter[p]);
    }
    Ok(PreparedMeasure {
        tilt,
        n_paths: b,
        steps,
        last_stop: stop.iter().copied().max().unwrap_or(0),
        stop,
        defaulter,
        clean,
        im_fc,
        im_tc,
        inputs: time_state_inputs(paths, dim, grid.maturity, grid.h()),
        increments: gathered_increments(paths, &(0..dim).collect::<Vec<_>>()),
        kernel: kernel.map(|k| Tensor::new([rows, dim], k)).transpose()?,
        alive: Tensor::new([rows, 1], alive)?,
        colva_driver: Tensor::new([rows, 1], colva)?,
        mva_driver: Tensor::new([rows, 1], mva)?,
        funding_base: Tensor::new([rows, 1], base)?,
        cva_target: Tensor::new([b, 1], cva_t)?,
        dva_target: Tensor::new([b, 1], dva_t)?,
    })
}

/// Step slices `[B, 1]` of a step-major column as graph constants.
fn step_constants(g: &mut Graph, t: &Tensor, b: usize, steps: usize) -> Result<Vec<NodeId>, BsdeError> {
    (0..steps)
        .map(|n| Ok(g.constant(Tensor::new([b, 1], t.data()[n * b..(n + 1) * b].to_vec())?)))
        .collect()
}

/// Forward recursion of one adjustment along a prepared measure; returns the
/// value node at every grid step, frozen from the stopping index on.
///
/// Default-loss kinds: `Y_{n+1} = Y_n + (r Y_n - CM_n) h + Z_n . dW_n`.
/// Driver kinds: `Y_{n+1} = Y_n + (f_n - r Y_n + CM_n) h - Z_n . dW_n`,
/// with compensator `CM_n = <q / sigma(X_n), Z_n>`.
fn recursion(
    g: &mut Graph,
    kind: AdjustmentKind,
    y0: NodeId,
    z: NodeId,
    prep: &PreparedMeasure,
    rates: &AdjustmentRates,
    h: f64,
    funding_offset: Option<&Tensor>,
) -> Result<Vec<NodeId>, BsdeError> {
    let (b, steps) = (prep.n_paths, prep.steps);
    let r = rates.risk_free;
    let dw = g.constant(prep.increments.clone());
    let zdw_all = g.mul(z, dw)?;
    let zdw = g.row_sum(zdw_all)?;
    let cm = match &prep.kernel {
        Some(k) => {
            let kn = g.constant(k.clone());
            let prod = g.mul(z, kn)?;
            Some(g.row_sum(prod)?)
        }
        None => None,
    };
    let alive = step_constants(g, &prep.alive, b, steps)?;
    let drivers = match kind {
        AdjustmentKind::Colva => Some(step_constants(g, &prep.colva_driver, b, steps)?),
        AdjustmentKind::Mva => Some(step_constants(g, &prep.mva_driver, b, steps)?),
        AdjustmentKind::Fva => {
            let mut base = prep.funding_base.clone();
            if let Some(off) = funding_offset {
                base = base.zip_map(off, |a, o| a - o);
            }
            Some(step_constants(g, &base, b, steps)?)
        }
        _ => None,
    };
    let mut y = g.broadcast_rows(y0, b)?;
    let mut values = Vec::with_capacity(steps + 1);
    values.push(y);
    for n in 0..steps {
        if n >= prep.last_stop {
            values.push(y);
            continue;
        }
        let zdw_n = g.slice_rows(zdw, n * b, (n + 1) * b)?;
        let cm_n = match cm {
            Some(c) => Some(g.slice_rows(c, n * b, (n + 1) * b)?),
            None => None,
        };
        let mut inc = if kind.is_default_loss() {
            let growth = g.scale(y, r * h)?;
            let mut inc = g.add(growth, zdw_n)?;
            if let Some(c) = cm_n {
                let ch = g.scale(c, h)?;
                inc = g.sub(inc, ch)?;
            }
            inc
        } else {
            let d_n = drivers.as_ref().expect("driver kinds carry drivers")[n];
            let f = if kind == AdjustmentKind::Fva {
                let arg = g.sub(d_n, y)?;
                let pos = g.pos_part(arg)?;
                let neg = g.neg_part(arg)?;
                let a = g.scale(pos, r - rates.funding_borrow)?;
                let bneg = g.scale(neg, r - rates.funding_lend)?;
                g.sub(a, bneg)?
            } else {
                d_n
            };
            let ry = g.scale(y, r)?;
            let mut drift = g.sub(f, ry)?;
            if let Some(c) = cm_n {
                drift = g.add(drift, c)?;
            }
            let dh = g.scale(drift, h)?;
            g.sub(dh, zdw_n)?
        };
        inc = g.mul(inc, alive[n])?;
        y = g.add(y, inc)?;
        values.push(y);
    }
    Ok(values)
}

/// Initial values and hedge network for a set of adjustments; with several
/// kinds the network output stacks one block of width `D` per kind.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustmentGroup {
    pub kinds: Vec<AdjustmentKind>,
    pub init: Vec<f64>,
    pub net: MlpParams,
}

impl AdjustmentGroup {
    fn bind(&self, g: &mut Graph, trainable: bool) -> (NodeId, BoundMlp) {
        let init = Tensor::row(self.init.clone());
        let y0 = if trainable { g.parameter(init) } else { g.constant(init) };
        (y0, self.net.bind(g, trainable))
    }

    /// Value paths of every kind in the group along one prepared measure.
    fn values(
        &self,
        g: &mut Graph,
        y0: NodeId,
        net: &BoundMlp,
        prep: &PreparedMeasure,
        rates: &AdjustmentRates,
        h: f64,
        kinds: &[AdjustmentKind],
        funding_offset: Option<&Tensor>,
    ) -> Result<Vec<(AdjustmentKind, Vec<NodeId>)>, BsdeError> {
        let x = g.constant(prep.inputs.clone());
        let out = net.forward(g, x)?;
        let d = prep.increments.cols();
        let mut res = Vec::new();
        for (i, &kind) in self.kinds.iter().enumerate() {
            if !kinds.contains(&kind) {
                continue;
            }
            let z = if self.kinds.len() == 1 {
                out
            } else {
                g.slice_cols(out, i * d, (i + 1) * d)?
            };
            let y0_i = if self.kinds.len() == 1 {
                y0
            } else {
                g.slice_cols(y0, i, i + 1)?
            };
            res.push((kind, recursion(g, kind, y0_i, z, prep, rates, h, funding_offset)?));
        }
        Ok(res)
    }
}

/// Third-layer solution: collateral, default and margin adjustments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustmentModel {
    pub groups: Vec<AdjustmentGroup>,
    pub tilts: MeasureSet,
    pub grid: TimeGrid,
}

const ADJ_KIND: &str = "adjustments";
const FUNDING_KIND: &str = "funding";

impl AdjustmentModel {
    pub fn kinds(&self) -> Vec<AdjustmentKind> {
        self.groups.iter().flat_map(|g| g.kinds.iter().copied()).collect()
    }

    pub fn initial(&self, kind: AdjustmentKind) -> Option<f64> {
        self.groups
            .iter()
            .find_map(|g| g.kinds.iter().position(|&k| k == kind).map(|i| g.init[i]))
    }

    pub fn to_container(&self) -> Container {
        let groups: Vec<_> = self
            .groups
            .iter()
            .map(|g| serde_json::json!({ "kinds": g.kinds, "arch": g.net.arch }))
            .collect();
        let meta = serde_json::json!({ "groups": groups, "tilts": self.tilts, "grid": self.grid });
        let mut c = Container::new(ADJ_KIND, meta);
        for (i, g) in self.groups.iter().enumerate() {
            g.net.write_arrays(&mut c, &format!("group{i}"));
            c.push(format!("group{i}.init"), Tensor::row(g.init.clone()));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, BsdeError> {
        c.expect_kind(ADJ_KIND)?;
        let bad = |e: serde_json::Error| BsdeError::Config(e.to_string());
        let tilts: MeasureSet = serde_json::from_value(c.meta["tilts"].clone()).map_err(bad)?;
        let grid: TimeGrid = serde_json::from_value(c.meta["grid"].clone()).map_err(bad)?;
        let metas = c.meta["groups"]
            .as_array()
            .ok_or_else(|| BsdeError::Config("adjustment metadata lacks groups".into()))?;
        let mut groups = Vec::with_capacity(metas.len());
        for (i, m) in metas.iter().enumerate() {
            let arch: MlpArch = serde_json::from_value(m["arch"].clone()).map_err(bad)?;
            groups.push(AdjustmentGroup {
                kinds: serde_json::from_value(m["kinds"].clone()).map_err(bad)?,
                init: c.get(&format!("group{i}.init"))?.data().to_vec(),
                net: MlpParams::read_arrays(c, &format!("group{i}"), arch)?,
            });
        }
        Ok(Self { groups, tilts, grid })
    }

    /// Sum of the third-layer adjustments as they enter the funding position,
    /// `cva - dva + colva + mva`, per step-major row of the prepared measure.
    fn lower_total(&self, prep: &PreparedMeasure, rates: &AdjustmentRates, h: f64) -> Result<Tensor, BsdeError> {
        let (b, steps) = (prep.n_paths, prep.steps);
        let mut total = vec![0.0; steps * b];
        let mut g = Graph::new();
        for group in &self.groups {
            let (y0, net) = group.bind(&mut g, false);
            for (kind, values) in group.values(&mut g, y0, &net, prep, rates, h, &AdjustmentKind::LOWER, None)? {
                let sign = if kind == AdjustmentKind::Dva { -1.0 } else { 1.0 };
                for n in 0..steps {
                    for (t, v) in total[n * b..(n + 1) * b].iter_mut().zip(g.value(values[n]).data()) {
                        *t += sign * v;
                    }
                }
            }
        }
        Ok(Tensor::new([steps * b, 1], total)?)
    }
}

/// Fourth-layer solution: the funding adjustment.
#[derive(Debug, Clone, PartialEq)]
pub struct FundingModel {
    pub init: f64,
    pub net: MlpParams,
    pub tilt: TiltPair,
    pub grid: TimeGrid,
}

impl FundingModel {
    fn group(&self) -> AdjustmentGroup {
        AdjustmentGroup {
            kinds: vec![AdjustmentKind::Fva],
            init: vec![self.init],
            net: self.net.clone(),
        }
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({ "arch": self.net.arch, "tilt": self.tilt, "grid": self.grid });
        let mut c = Container::new(FUNDING_KIND, meta);
        c.push("init", Tensor::scalar(self.init));
        self.net.write_arrays(&mut c, "net");
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, BsdeError> {
        c.expect_kind(FUNDING_KIND)?;
        let bad = |e: serde_json::Error| BsdeError::Config(e.to_string());
        let arch: MlpArch = serde_json::from_value(c.meta["arch"].clone()).map_err(bad)?;
        Ok(Self {
            init: c.get("init")?.item(),
            net: MlpParams::read_arrays(c, "net", arch)?,
            tilt: serde_json::from_value(c.meta["tilt"].clone()).map_err(bad)?,
            grid: serde_json::from_value(c.meta["grid"].clone()).map_err(bad)?,
        })
    }
}

fn check_lower(lower: &LowerLayers) -> Result<(), BsdeError> {
    let dim = lower.market.dim();
    let d = lower.portfolio.underlyings;
    let spec = lower.defaults;
    if spec.bank_index < d || spec.cpty_index < d || spec.bank_index >= dim || spec.cpty_index >= dim {
        return Err(BsdeError::Config(format!(
            "default drivers ({}, {}) must be state components beyond the {d} underlyings and below {dim}",
            spec.bank_index, spec.cpty_index
        )));
    }
    if lower.clean.grid != lower.grid {
        return Err(BsdeError::Config(
            "clean model grid differs from the adjustment grid".into(),
        ));
    }
    if let Some(m) = lower.margin {
        if m.steps != lower.grid.steps {
            return Err(BsdeError::Config(
                "margin model grid differs from the adjustment grid".into(),
            ));
        }
    }
    Ok(())
}

fn new_net(input: usize, hidden: &[usize], output: usize, seed: u64) -> MlpParams {
    let mut net = MlpParams::init(MlpArch::new(input, hidden.to_vec(), output), seed);
    // Zero hedge at the start: the first iterations see the plain Monte Carlo estimator.
    let last = net.weights.len() - 1;
    net.weights[last].data_mut().iter_mut().for_each(|w| *w = 0.0);
    net
}

/// One optimization problem: groups of kinds, each kind trained on its measures.
struct Problem<'a> {
    lower: &'a LowerLayers<'a>,
    tilts: Vec<TiltPair>,
    /// For each group, for each of its kinds, indices into `tilts`.
    kind_measures: Vec<Vec<Vec<usize>>>,
    lower_adjustments: Option<&'a AdjustmentModel>,
    pool_seed: u64,
}

impl Problem<'_> {
    fn batch(&self, k: usize, b: usize) -> Result<Vec<(PreparedMeasure, Option<Tensor>)>, BsdeError> {
        let lower = self.lower;
        let inc = sample_increments(
            self.pool_seed,
            (k * b) as u64,
            b,
            &lower.grid,
            &lower.market.correlation,
        );
        self.tilts
            .iter()
            .map(|&t| {
                let prep = prepare_measure(lower, t, &inc)?;
                let off = match self.lower_adjustments {
                    Some(m) => Some(m.lower_total(&prep, lower.rates, lower.grid.h())?),
                    None => None,
                };
                Ok((prep, off))
            })
            .collect()
    }
}

fn measure_label(tilt: &TiltPair) -> &'static str {
    if tilt.is_zero() {
        "original"
    } else {
        "tilted"
    }
}

fn optimize(
    problem: &Problem,
    groups: &mut [AdjustmentGroup],
    cfg: &TrainConfig,
    curve: &mut TrainingCurve,
) -> Result<(), BsdeError> {
    let lower = problem.lower;
    let h = lower.grid.h();
    let b = cfg.batch_size;
    let first = problem.batch(0, b)?;
    let bytes: usize = first
        .iter()
        .map(|(p, o)| p.bytes() + o.as_ref().map_or(0, |t| 8 * t.len()))
        .sum();
    let cache_ok = bytes * cfg.batches_per_epoch() <= CACHE_BYTES;
    let mut cache: Vec<Option<Vec<(PreparedMeasure, Option<Tensor>)>>> =
        (0..cfg.batches_per_epoch()).map(|_| None).collect();
    cache[0] = Some(first);

    let mut adams: Vec<AdamState> = groups
        .iter()
        .map(|gr| {
            let init = Tensor::row(gr.init.clone());
            let mut params = vec![&init];
            params.extend(gr.net.tensors());
            AdamState::new(&params, cfg.adam)
        })
        .collect();
    let total = cfg.iterations();
    for it in 0..total {
        let k = it % cfg.batches_per_epoch();
        if cache[k].is_none() {
            cache[k] = Some(problem.batch(k, b)?);
        }
        let measures = cache[k].as_ref().expect("batch prepared");
        let mut total_loss = 0.0;
        for (gi, group) in groups.iter_mut().enumerate() {
            let mut g = Graph::new();
            let (y0, net) = group.bind(&mut g, true);
            let mut losses = Vec::new();
            for (mi, (prep, off)) in measures.iter().enumerate() {
                let kinds: Vec<AdjustmentKind> = group
                    .kinds
                    .iter()
                    .zip(&problem.kind_measures[gi])
                    .filter(|(_, ms)| ms.contains(&mi))
                    .map(|(k, _)| *k)
                    .collect();
                if kinds.is_empty() {
                    continue;
                }
                for (kind, values) in group.values(&mut g, y0, &net, prep, lower.rates, h, &kinds, off.as_ref())? {
                    let terminal = *values.last().expect("at least one node");
                    let target = match kind {
                        AdjustmentKind::Cva => g.constant(prep.cva_target.clone()),
                        AdjustmentKind::Dva => g.constant(prep.dva_target.clone()),
                        _ => g.constant(Tensor::zeros(prep.n_paths, 1)),
                    };
                    let diff = g.sub(terminal, target)?;
                    let sq = g.square(diff)?;
                    let l = g.mean(sq)?;
                    losses.push((kind, measure_label(&prep.tilt), l));
                }
            }
            let mut loss = losses[0].2;
            for &(_, _, l) in &losses[1..] {
                loss = g.add(loss, l)?;
            }
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(BsdeError::Diverged(format!("adjustment loss at iteration {it}")));
            }
            for &(kind, label, l) in &losses {
                curve.push(it, format!("{}/loss/{label}", kind.name()), g.value(l).item());
            }
            total_loss += loss_value;
            let mut grads = g.backward(loss)?;
            let mut grad_list = vec![grads.take(y0)];
            grad_list.extend(net.nodes().into_iter().map(|id| grads.take(id)));
            drop(g);
            let mut init = Tensor::row(std::mem::take(&mut group.init));
            {
                let mut params: Vec<&mut Tensor> = vec![&mut init];
                params.extend(group.net.tensors_mut());
                adams[gi].update(&mut params, &grad_list, cfg.lr.rate(it, total))?;
            }
            group.init = init.into_data();
            for (i, kind) in group.kinds.iter().enumerate() {
                curve.push(it, format!("{}/init", kind.name()), group.init[i]);
            }
        }
        curve.push(it, "loss", total_loss);
        if !cache_ok {
            cache[k] = None;
        }
    }
    Ok(())
}

fn unique_tilts(per_kind: &[Vec<TiltPair>]) -> Vec<TiltPair> {
    let mut out: Vec<TiltPair> = Vec::new();
    for t in per_kind.iter().flatten() {
        if !out.contains(t) {
            out.push(*t);
        }
    }
    out
}

/// Trains the third layer for `kinds` (a subset of the collateral, default and
/// margin adjustments) on the original and tilted measures.
pub fn train_adjustments(
    lower: &LowerLayers,
    kinds: &[AdjustmentKind],
    tilts: &MeasureSet,
    mode: LayerMode,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(AdjustmentModel, TrainingCurve), BsdeError> {
    cfg.validate()?;
    check_lower(lower)?;
    if kinds.is_empty() || kinds.contains(&AdjustmentKind::Fva) {
        return Err(BsdeError::Config(
            "third layer trains a non-empty subset of colva, cva, dva, mva".into(),
        ));
    }
    let dim = lower.market.dim();
    let group_kinds: Vec<Vec<AdjustmentKind>> = match mode {
        LayerMode::Split => kinds.iter().map(|&k| vec![k]).collect(),
        LayerMode::Joint => vec![kinds.to_vec()],
    };
    let per_kind: Vec<Vec<TiltPair>> = kinds.iter().map(|&k| tilts.measures(k)).collect();
    let all = unique_tilts(&per_kind);
    let index = |t: &TiltPair| all.iter().position(|a| a == t).expect("tilt listed");
    let kind_measures: Vec<Vec<Vec<usize>>> = group_kinds
        .iter()
        .map(|ks| {
            ks.iter()
                .map(|&k| tilts.measures(k).iter().map(index).collect())
                .collect()
        })
        .collect();
    let mut groups: Vec<AdjustmentGroup> = group_kinds
        .into_iter()
        .enumerate()
        .map(|(i, ks)| AdjustmentGroup {
            init: vec![0.0; ks.len()],
            net: new_net(
                1 + dim,
                &cfg.hidden,
                ks.len() * dim,
                derive_seed(seed, &format!("adjustments/init/{i}")),
            ),
            kinds: ks,
        })
        .collect();
    let problem = Problem {
        lower,
        tilts: all,
        kind_measures,
        lower_adjustments: None,
        pool_seed: derive_seed(seed, "adjustments/pool"),
    };
    let mut curve = TrainingCurve::default();
    optimize(&problem, &mut groups, cfg, &mut curve)?;
    Ok((
        AdjustmentModel {
            groups,
            tilts: *tilts,
            grid: lower.grid,
        },
        curve,
    ))
}

/// Trains the funding adjustment with the third-layer values re-evaluated
/// along the funding measures' paths.
pub fn train_funding(
    lower: &LowerLayers,
    adjustments: &AdjustmentModel,
    tilt: TiltPair,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(FundingModel, TrainingCurve), BsdeError> {
    cfg.validate()?;
    check_lower(lower)?;
    if adjustments.grid != lower.grid {
        return Err(BsdeError::Config(
            "adjustment model grid differs from the funding grid".into(),
        ));
    }
    let dim = lower.market.dim();
    let set = MeasureSet {
        fva: tilt,
        ..Default::default()
    };
    let tilts = set.measures(AdjustmentKind::Fva);
    let mut groups = vec![AdjustmentGroup {
        kinds: vec![AdjustmentKind::Fva],
        init: vec![0.0],
        net: new_net(1 + dim, &cfg.hidden, dim, derive_seed(seed, "funding/init")),
    }];
    let problem = Problem {
        lower,
        kind_measures: vec![vec![(0..tilts.len()).collect()]],
        tilts,
        lower_adjustments: Some(adjustments),
        pool_seed: derive_seed(seed, "funding/pool"),
    };
    let mut curve = TrainingCurve::default();
    optimize(&problem, &mut groups, cfg, &mut curve)?;
    let g = groups.pop().expect("one group");
    Ok((
        FundingModel {
            init: g.init[0],
            net: g.net,
            tilt,
            grid: lower.grid,
        },
        curve,
    ))
}

/// Adjustment values along evaluation paths of one measure.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustmentPaths {
    pub tilt: TiltPair,
    pub n_paths: usize,
    pub steps: usize,
    pub kinds: Vec<AdjustmentKind>,
    /// Per kind, `[path][step 0..=N]`.
    pub values: Vec<Vec<f64>>,
    /// Per kind, the terminal target of each path.
    pub targets: Vec<Vec<f64>>,
    pub stop: Vec<usize>,
    pub defaulter: Vec<Option<Party>>,
    pub clean: Vec<f64>,
    pub im_fc: Vec<f64>,
    pub im_tc: Vec<f64>,
}

impl AdjustmentPaths {
    pub fn value(&self, kind: AdjustmentKind, path: usize, n: usize) -> Option<f64> {
        let i = self.kinds.iter().position(|&k| k == kind)?;
        Some(self.values[i][path * (self.steps + 1) + n])
    }

    /// `Y_{stop} - target` per path.
    pub fn terminal_errors(&self, kind: AdjustmentKind) -> Option<Vec<f64>> {
        let i = self.kinds.iter().position(|&k| k == kind)?;
        Some(
            (0..self.n_paths)
                .map(|p| self.values[i][p * (self.steps + 1) + self.stop[p]] - self.targets[i][p])
                .collect(),
        )
    }
}

/// Evaluates the trained adjustments along paths driven by `increments` under `tilt`.
pub fn adjustment_paths(
    lower: &LowerLayers,
    model: &AdjustmentModel,
    funding: Option<&FundingModel>,
    tilt: TiltPair,
    increments: &Increments,
) -> Result<AdjustmentPaths, BsdeError> {
    let drift = tilt.drift_tilt(lower.market.dim(), lower.defaults);
    let paths = simulate(lower.market, &drift, increments, &lower.grid)?;
    adjustments_along(lower, model, funding, tilt, &paths)
}

/// Evaluates the trained adjustments along given paths simulated under `tilt`.
pub fn adjustments_along(
    lower: &LowerLayers,
    model: &AdjustmentModel,
    funding: Option<&FundingModel>,
    tilt: TiltPair,
    paths: &PathBatch,
) -> Result<AdjustmentPaths, BsdeError> {
    check_lower(lower)?;
    let h = lower.grid.h();
    let steps = lower.grid.steps;
    let mut kinds = model.kinds();
    if funding.is_some() {
        kinds.push(AdjustmentKind::Fva);
    }
    let m = paths.n_paths;
    let stride = steps + 1;
    let mut out = AdjustmentPaths {
        tilt,
        n_paths: m,
        steps,
        values: vec![vec![0.0; m * stride]; kinds.len()],
        targets: vec![vec![0.0; m]; kinds.len()],
        kinds: kinds.clone(),
        stop: Vec::with_capacity(m),
        defaulter: Vec::with_capacity(m),
        clean: Vec::with_capacity(m * stride),
        im_fc: Vec::with_capacity(m * stride),
        im_tc: Vec::with_capacity(m * stride),
    };
    let mut start = 0;
    while start < m {
        let end = (start + EVAL_CHUNK).min(m);
        let prep = prepare_paths(lower, tilt, &paths.slice(start, end))?;
        let mut g = Graph::new();
        let mut chunk_values = Vec::new();
        for group in &model.groups {
            let (y0, net) = group.bind(&mut g, false);
            chunk_values.extend(group.values(&mut g, y0, &net, &prep, lower.rates, h, &group.kinds, None)?);
        }
        if let Some(f) = funding {
            let offset = model.lower_total(&prep, lower.rates, h)?;
            let group = f.group();
            let (y0, net) = group.bind(&mut g, false);
            chunk_values.extend(group.values(&mut g, y0, &net, &prep, lower.rates, h, &group.kinds, Some(&offset))?);
        }
        for (kind, nodes) in chunk_values {
            let i = kinds.iter().position(|&k| k == kind).expect("kind listed");
            for (n, id) in nodes.iter().enumerate() {
                for (p, v) in g.value(*id).data().iter().enumerate() {
                    out.values[i][(start + p) * stride + n] = *v;
                }
            }
            for p in 0..prep.n_paths {
                out.targets[i][start + p] = prep.target(kind, p);
            }
        }
        out.stop.extend_from_slice(&prep.stop);
        out.defaulter.extend_from_slice(&prep.defaulter);
        out.clean.extend_from_slice(&prep.clean);
        out.im_fc.extend_from_slice(&prep.im_fc);
        out.im_tc.extend_from_slice(&prep.im_tc);
        start = end;
    }
    Ok(out)
}

/// Terminal errors per adjustment and measure on shared evaluation increments.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalErrors {
    pub n_paths: usize,
    /// Column labels `kind/measure`.
    pub columns: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl TerminalErrors {
    pub fn column(&self, label: &str) -> Option<&[f64]> {
        self.columns
            .iter()
            .position(|c| c == label)
            .map(|i| self.values[i].as_slice())
    }

    pub fn mean_abs(&self, label: &str) -> Option<f64> {
        self.column(label)
            .map(|v| v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64)
    }
}

pub fn terminal_errors(
    lower: &LowerLayers,
    model: &AdjustmentModel,
    funding: Option<&FundingModel>,
    increments: &Increments,
) -> Result<TerminalErrors, BsdeError> {
    let mut kinds = model.kinds();
    let mut set = model.tilts;
    if let Some(f) = funding {
        kinds.push(AdjustmentKind::Fva);
        set.fva = f.tilt;
    }
    let per_kind: Vec<Vec<TiltPair>> = kinds.iter().map(|&k| set.measures(k)).collect();
    let mut out = TerminalErrors {
        n_paths: increments.n_paths,
        columns: Vec::new(),
        values: Vec::new(),
    };
    for tilt in unique_tilts(&per_kind) {
        let paths = adjustment_paths(lower, model, funding, tilt, increments)?;
        for (kind, measures) in kinds.iter().zip(&per_kind) {
            if measures.contains(&tilt) {
                out.columns.push(format!("{}/{}", kind.name(), measure_label(&tilt)));
                out.values.push(paths.terminal_errors(*kind).expect("kind evaluated"));
            }
        }
    }
    Ok(out)
}

/// Compensator `<q / sigma, z>` of a drift tilt.
pub fn compensator(q: &[f64], sigma: &[f64], z: &[f64]) -> Result<f64, BsdeError> {
    if q.len() != sigma.len() || q.len() != z.len() {
        return Err(BsdeError::Config("compensator arguments differ in length".into()));
    }
    let mut s = 0.0;
    for i in 0..q.len() {
        if q[i] != 0.0 {
            if sigma[i] == 0.0 {
                return Err(BsdeError::Config(format!("zero diffusion in tilted component {i}")));
            }
            s += q[i] / sigma[i] * z[i];
        }
    }
    Ok(s)
}

/// Per-path `Y_stop - target` for a hand-set group, used to check the recursions.
#[cfg(test)]
pub(crate) fn group_terminal(
    group: &AdjustmentGroup,
    prep: &PreparedMeasure,
    rates: &AdjustmentRates,
    h: f64,
) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let (y0, net) = group.bind(&mut g, false);
    group
        .values(&mut g, y0, &net, prep, rates, h, &group.kinds, None)
        .unwrap()
        .into_iter()
        .map(|(_, v)| (0..=prep.steps).flat_map(|n| g.value(v[n]).data().to_vec()).collect())
        .collect()
}
