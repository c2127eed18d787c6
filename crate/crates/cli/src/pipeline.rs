//! Pipeline stages. Each stage reads its prerequisites from the output
//! directory, so layers run strictly in order.

use std::path::Path;

use xva_core::deep_bsde::{
    adjustment_paths, clean_value_paths, terminal_errors, train_adjustments, train_clean, train_funding,
    AdjustmentKind, AdjustmentModel, CleanModel, CleanPaths, FundingModel, LowerLayers, TiltPair, TrainingCurve,
};
use xva_core::initial_margin::{empirical_quantile, train_margin, ImModel};
use xva_core::portfolio::{analytic_portfolio_value, total_adjustment};
use xva_core::reference::{reference_adjustment, reference_clean, reference_margin, ReferenceValue};
use xva_core::stochastic::{derive_seed, sample_increments, simulate, DriftTilt, Increments, PathBatch};

use crate::artifacts::{curve_file, fmt_f64, Manifest, Store, Table, MODEL_FILES};
use crate::config::Setup;
use crate::error::CliError;

pub const REPORT_FILES: [&str; 6] = [
    "clean_percentiles.csv",
    "im_paths.csv",
    "xva_paths.csv",
    "terminal_errors.csv",
    "training_curves.csv",
    "tva_summary.csv",
];
pub const REFERENCE_FILE: &str = "reference.csv";
pub const PATHS_FILE: &str = "paths.csv";

pub struct Run {
    pub setup: Setup,
    pub store: Store,
}

impl Run {
    pub fn open(config: &Path, out: &Path, seed: Option<u64>) -> Result<Self, CliError> {
        let mut setup = Setup::load(config)?;
        if let Some(s) = seed {
            setup.config.seed = s;
        }
        let manifest = Manifest::new(&setup.config_bytes, &setup.portfolio_bytes, setup.config.seed);
        let store = Store::open(out, manifest)?;
        Ok(Self { setup, store })
    }

    fn seed(&self, stage: &str) -> u64 {
        self.store.manifest.stage_seed(stage)
    }

    pub fn clean(&self) -> Result<CleanModel, CliError> {
        Ok(CleanModel::from_container(&self.store.read_container(MODEL_FILES[0])?)?)
    }

    pub fn margin(&self) -> Result<ImModel, CliError> {
        Ok(ImModel::from_container(&self.store.read_container(MODEL_FILES[1])?)?)
    }

    pub fn adjustments(&self) -> Result<AdjustmentModel, CliError> {
        Ok(AdjustmentModel::from_container(
            &self.store.read_container(MODEL_FILES[2])?,
        )?)
    }

    pub fn funding(&self) -> Result<FundingModel, CliError> {
        Ok(FundingModel::from_container(
            &self.store.read_container(MODEL_FILES[3])?,
        )?)
    }

    pub fn lower<'a>(&'a self, clean: &'a CleanModel, margin: &'a ImModel) -> LowerLayers<'a> {
        LowerLayers {
            market: &self.setup.market,
            grid: self.setup.grid,
            portfolio: &self.setup.portfolio,
            clean,
            margin: Some(margin),
            defaults: &self.setup.defaults,
            rates: &self.setup.rates,
        }
    }

    /// Layer `k` needs the models of layers `1..k`.
    pub fn require_below(&self, layer: usize) -> Result<(), CliError> {
        self.store.require(&MODEL_FILES[..layer - 1])
    }

    /// Drops the records of everything that depends on layer `layer`.
    fn invalidate_from(&mut self, layer: usize) -> Result<(), CliError> {
        let mut stale: Vec<String> = MODEL_FILES[layer - 1..].iter().map(|s| s.to_string()).collect();
        stale.extend((layer..=4).map(curve_file));
        stale.extend(REPORT_FILES.iter().map(|s| s.to_string()));
        stale.push(REFERENCE_FILE.to_string());
        let names: Vec<&str> = stale.iter().map(String::as_str).collect();
        self.store.forget(&names)
    }

    fn write_curve(&mut self, layer: usize, curve: &TrainingCurve) -> Result<(), CliError> {
        let mut t = Table::new(&["iteration", "metric", "value"]);
        for r in &curve.rows {
            t.row(&[r.iteration.to_string(), r.metric.clone(), fmt_f64(r.value)]);
        }
        self.store.write(&curve_file(layer), &t.into_bytes())
    }

    /// Untilted evaluation batch shared by the report and the references, so
    /// path ids agree across their CSVs.
    pub fn eval_increments(&self, n_paths: usize) -> Increments {
        let s = &self.setup;
        sample_increments(
            derive_seed(self.seed("report"), "paths"),
            0,
            n_paths,
            &s.grid,
            &s.market.correlation,
        )
    }

    pub fn simulate(&mut self) -> Result<(), CliError> {
        let s = &self.setup;
        let n = s.config.report.dump_paths;
        let inc = sample_increments(self.seed("simulate"), 0, n, &s.grid, &s.market.correlation);
        let paths = simulate(&s.market, &DriftTilt::zero(s.market.dim()), &inc, &s.grid).map_err(num)?;
        let mut header = vec!["path".to_string(), "step".into(), "t".into()];
        header.extend((1..=s.market.dim()).map(|i| format!("x{i}")));
        let mut t = Table::new(&header);
        for p in 0..n {
            for k in 0..=s.grid.steps {
                let mut row = vec![p.to_string(), k.to_string(), fmt_f64(s.grid.t(k))];
                row.extend(paths.state(p, k).iter().map(|v| fmt_f64(*v)));
                t.row(&row);
            }
        }
        self.store.write(PATHS_FILE, &t.into_bytes())
    }

    pub fn train_layer1(&mut self) -> Result<(), CliError> {
        let s = &self.setup;
        let (model, curve) = train_clean(&s.market, &s.grid, &s.portfolio, &s.config.layer1, self.seed("layer1"))?;
        self.invalidate_from(1)?;
        self.store.write(MODEL_FILES[0], &model.to_container().to_bytes())?;
        self.write_curve(1, &curve)
    }

    pub fn train_layer2(&mut self) -> Result<(), CliError> {
        self.require_below(2)?;
        let clean = self.clean()?;
        let s = &self.setup;
        let d = s.underlyings();
        let market = s.market.leading(d).map_err(num)?;
        let cfg = &s.config.layer2;
        let seed = self.seed("layer2");
        let inc = sample_increments(derive_seed(seed, "pool"), 0, cfg.samples, &s.grid, &market.correlation);
        let paths = simulate(&market, &DriftTilt::zero(d), &inc, &s.grid).map_err(num)?;
        let values = clean_value_paths(&clean, &paths, &s.portfolio, s.market.rate)?;
        let (model, curve) = train_margin(&values, &paths, d, &s.risk, cfg, seed)?;
        self.invalidate_from(2)?;
        self.store.write(MODEL_FILES[1], &model.to_container().to_bytes())?;
        self.write_curve(2, &curve)
    }

    pub fn train_layer3(&mut self) -> Result<(), CliError> {
        self.require_below(3)?;
        let (clean, margin) = (self.clean()?, self.margin()?);
        let lower = self.lower(&clean, &margin);
        let c = &self.setup.config;
        let (model, curve) = train_adjustments(
            &lower,
            &c.layer3.kinds,
            &c.tilts,
            c.layer3.mode,
            &c.layer3.train,
            self.seed("layer3"),
        )?;
        self.invalidate_from(3)?;
        self.store.write(MODEL_FILES[2], &model.to_container().to_bytes())?;
        self.write_curve(3, &curve)
    }

    pub fn train_layer4(&mut self) -> Result<(), CliError> {
        self.require_below(4)?;
        let (clean, margin, adj) = (self.clean()?, self.margin()?, self.adjustments()?);
        let lower = self.lower(&clean, &margin);
        let c = &self.setup.config;
        let (model, curve) = train_funding(&lower, &adj, c.funding_tilt(), &c.layer4, self.seed("layer4"))?;
        self.invalidate_from(4)?;
        self.store.write(MODEL_FILES[3], &model.to_container().to_bytes())?;
        self.write_curve(4, &curve)
    }

    /// Metric CSVs for layers `1..=layer`.
    pub fn report(&mut self, layer: usize) -> Result<(), CliError> {
        self.require_below(layer + 1)?;
        let clean = self.clean()?;
        let s = &self.setup;
        let n_eval = s.config.report.eval_paths;
        let n_sample = s.config.report.sample_paths;
        let inc = self.eval_increments(n_eval);
        let paths = simulate(&s.market, &DriftTilt::zero(s.market.dim()), &inc, &s.grid).map_err(num)?;
        let values = clean_value_paths(&clean, &paths, &s.portfolio, s.market.rate)?;
        let mut out: Vec<(&str, Vec<u8>)> = vec![("clean_percentiles.csv", self.clean_percentiles(&paths, &values)?)];

        if layer >= 2 {
            let margin = self.margin()?;
            out.push(("im_paths.csv", self.im_paths(&margin, &paths, &values, n_sample)?));
            if layer >= 3 {
                let adj = self.adjustments()?;
                let funding = if layer >= 4 { Some(self.funding()?) } else { None };
                let lower = self.lower(&clean, &margin);
                out.push((
                    "xva_paths.csv",
                    xva_paths(&lower, &adj, funding.as_ref(), &inc, n_sample)?,
                ));
                let errs = terminal_errors(&lower, &adj, funding.as_ref(), &inc)?;
                let mut t = Table::new(&errs.columns);
                for p in 0..errs.n_paths {
                    t.row(&errs.values.iter().map(|c| fmt_f64(c[p])).collect::<Vec<_>>());
                }
                out.push(("terminal_errors.csv", t.into_bytes()));
                if let Some(f) = &funding {
                    if let Some(bytes) = tva_summary(&adj, f) {
                        out.push(("tva_summary.csv", bytes));
                    }
                }
            }
        }
        out.push(("training_curves.csv", self.training_curves(layer)?));
        let stale: Vec<&str> = REPORT_FILES
            .iter()
            .copied()
            .filter(|f| !out.iter().any(|(n, _)| n == f))
            .collect();
        self.store.forget(&stale)?;
        for (name, bytes) in out {
            self.store.write(name, &bytes)?;
        }
        Ok(())
    }

    fn clean_percentiles(&self, paths: &PathBatch, values: &CleanPaths) -> Result<Vec<u8>, CliError> {
        let s = &self.setup;
        let m = paths.n_paths;
        let mut t = Table::new(&[
            "step",
            "t",
            "mean",
            "p01",
            "p99",
            "analytic_mean",
            "analytic_p01",
            "analytic_p99",
        ]);
        for n in 0..=s.grid.steps {
            let net: Vec<f64> = (0..m).map(|p| values.portfolio_live(p, n)).collect();
            let exact = (0..m)
                .map(|p| analytic_portfolio_value(s.grid.t(n), paths.state(p, n), &s.portfolio, &s.market))
                .collect::<Result<Vec<f64>, _>>()
                .map_err(num)?;
            let stats = |v: &[f64]| -> Result<[String; 3], CliError> {
                Ok([
                    fmt_f64(v.iter().sum::<f64>() / v.len() as f64),
                    fmt_f64(empirical_quantile(v, 0.01)?),
                    fmt_f64(empirical_quantile(v, 0.99)?),
                ])
            };
            let mut row = vec![n.to_string(), fmt_f64(s.grid.t(n))];
            row.extend(stats(&net)?);
            row.extend(stats(&exact)?);
            t.row(&row);
        }
        Ok(t.into_bytes())
    }

    fn im_paths(
        &self,
        margin: &ImModel,
        paths: &PathBatch,
        values: &CleanPaths,
        n: usize,
    ) -> Result<Vec<u8>, CliError> {
        let s = &self.setup;
        let d = s.underlyings();
        let sub = paths.slice(0, n);
        let sub_values = clean_subset(values, n);
        let (fc, tc) = margin.margin_paths(&sub_values, &sub)?;
        let mut header = vec!["path".to_string(), "step".into(), "t".into()];
        header.extend((1..=d).map(|i| format!("x{i}")));
        header.extend(["clean".into(), "im_fc".into(), "im_tc".into()]);
        let mut t = Table::new(&header);
        let stride = s.grid.steps + 1;
        for p in 0..n {
            for k in 0..=s.grid.steps {
                let mut row = vec![p.to_string(), k.to_string(), fmt_f64(s.grid.t(k))];
                row.extend(sub.state(p, k)[..d].iter().map(|v| fmt_f64(*v)));
                row.push(fmt_f64(sub_values.portfolio_live(p, k)));
                row.push(fmt_f64(fc[p * stride + k]));
                row.push(fmt_f64(tc[p * stride + k]));
                t.row(&row);
            }
        }
        Ok(t.into_bytes())
    }

    fn training_curves(&self, layer: usize) -> Result<Vec<u8>, CliError> {
        let mut t = Table::new(&["layer", "iteration", "metric", "value"]);
        for k in 1..=layer {
            let bytes = self.store.read(&curve_file(k))?;
            let mut r = csv::Reader::from_reader(bytes.as_slice());
            for rec in r.records() {
                let rec = rec.map_err(|e| CliError::Config(format!("{}: {e}", curve_file(k))))?;
                t.row(&[
                    k.to_string(),
                    rec[0].to_string(),
                    rec[1].to_string(),
                    rec[2].to_string(),
                ]);
            }
        }
        Ok(t.into_bytes())
    }

    /// Nested Monte Carlo references for layer `layer`, or every layer.
    pub fn reference(&mut self, layer: Option<usize>) -> Result<(), CliError> {
        let top = layer.unwrap_or(4);
        self.require_below(top + 1)?;
        let layers: Vec<usize> = match layer {
            Some(k) => vec![k],
            None => (1..=4).collect(),
        };
        let clean = self.clean()?;
        let margin = if top >= 2 { Some(self.margin()?) } else { None };
        let adj = if top >= 3 { Some(self.adjustments()?) } else { None };
        let funding = if top >= 4 { Some(self.funding()?) } else { None };
        let s = &self.setup;
        let rc = &s.config.reference;
        let spec = s.config.reference_spec();
        let n_outer = rc.paths.iter().max().map_or(0, |p| p + 1);
        let inc = self.eval_increments(n_outer);
        let outer = simulate(&s.market, &DriftTilt::zero(s.market.dim()), &inc, &s.grid).map_err(num)?;
        let values = clean_value_paths(&clean, &outer, &s.portfolio, s.market.rate)?;
        let base = self.seed("reference");
        let target_seed = |kind: &str, p: usize, n: usize| derive_seed(base, &format!("{kind}/{p}/{n}"));
        let d = s.underlyings();
        let stride = s.grid.steps + 1;

        let mut t = Table::new(&[
            "kind",
            "path",
            "step",
            "t",
            "reference",
            "se",
            "m_ref",
            "n_ref",
            "network",
        ]);
        let mut push = |kind: &str, p: usize, n: usize, r: &ReferenceValue, network: f64| {
            t.row(&[
                kind.to_string(),
                p.to_string(),
                n.to_string(),
                fmt_f64(s.grid.t(n)),
                fmt_f64(r.value),
                fmt_f64(r.se),
                r.inner_paths.to_string(),
                r.inner_steps.to_string(),
                fmt_f64(network),
            ]);
        };
        let along = match (&margin, &adj) {
            (Some(m), Some(a)) => {
                let lower = self.lower(&clean, m);
                Some(adjustment_paths(
                    &lower,
                    a,
                    funding.as_ref(),
                    TiltPair::default(),
                    &inc,
                )?)
            }
            _ => None,
        };
        for &p in &rc.paths {
            for &n in &rc.steps {
                if layers.contains(&1) {
                    let r = reference_clean(
                        &s.market,
                        &s.portfolio,
                        &s.grid,
                        n,
                        &outer.state(p, n)[..d],
                        &spec,
                        target_seed("clean", p, n),
                    )?;
                    push("clean", p, n, &r, values.portfolio_live(p, n));
                }
                if layers.contains(&2) {
                    let m = margin.as_ref().expect("loaded for layer 2");
                    let (fc, tc) = reference_margin(
                        &s.market,
                        &clean,
                        &s.portfolio,
                        &s.risk,
                        &outer,
                        p,
                        n,
                        &spec,
                        target_seed("im", p, n),
                    )?;
                    let live: Vec<f64> = (0..s.portfolio.len()).map(|j| values.live(p, n, j)).collect();
                    let (nfc, ntc) = m.eval_point(n, &outer.state(p, n)[..d], &live)?;
                    push("im_fc", p, n, &fc, nfc);
                    push("im_tc", p, n, &tc, ntc);
                }
                let mut kinds: Vec<AdjustmentKind> = Vec::new();
                if layers.contains(&3) {
                    kinds.extend(adj.as_ref().expect("loaded for layer 3").kinds());
                }
                if layers.contains(&4) {
                    kinds.push(AdjustmentKind::Fva);
                }
                if kinds.is_empty() {
                    continue;
                }
                let along = along.as_ref().expect("evaluated for layers 3 and 4");
                if along.stop[p] < n || (along.stop[p] == n && along.defaulter[p].is_some()) {
                    eprintln!(
                        "skipping adjustment references on path {p} at step {n}: the path stopped at step {}",
                        along.stop[p]
                    );
                    continue;
                }
                let lower = self.lower(&clean, margin.as_ref().expect("loaded"));
                for kind in kinds {
                    let r = reference_adjustment(
                        kind,
                        &lower,
                        adj.as_ref().expect("loaded"),
                        funding.as_ref(),
                        &outer,
                        p,
                        n,
                        &spec,
                        target_seed(kind.name(), p, n),
                    )?;
                    push(
                        kind.name(),
                        p,
                        n,
                        &r,
                        along.values[along.kinds.iter().position(|&k| k == kind).expect("kind")][p * stride + n],
                    );
                }
            }
        }
        self.store.write(REFERENCE_FILE, &t.into_bytes())
    }
}

fn num(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

fn clean_subset(values: &CleanPaths, n: usize) -> CleanPaths {
    let stride = (values.steps + 1) * values.contracts;
    CleanPaths {
        n_paths: n,
        steps: values.steps,
        contracts: values.contracts,
        maturities: values.maturities.clone(),
        frozen: values.frozen[..n * stride].to_vec(),
    }
}

fn xva_paths(
    lower: &LowerLayers,
    adj: &AdjustmentModel,
    funding: Option<&FundingModel>,
    inc: &Increments,
    n: usize,
) -> Result<Vec<u8>, CliError> {
    let sub = Increments {
        n_paths: n,
        steps: inc.steps,
        dim: inc.dim,
        first_path: inc.first_path,
        data: inc.data[..n * inc.steps * inc.dim].to_vec(),
    };
    let a = adjustment_paths(lower, adj, funding, TiltPair::default(), &sub)?;
    let full = AdjustmentKind::LOWER.iter().all(|k| a.kinds.contains(k)) && funding.is_some();
    let mut header = vec![
        "path".to_string(),
        "step".into(),
        "t".into(),
        "stop".into(),
        "defaulter".into(),
    ];
    header.extend(a.kinds.iter().map(|k| k.name().to_string()));
    if full {
        header.push("tva".into());
    }
    let mut t = Table::new(&header);
    let grid = lower.grid;
    for p in 0..n {
        let who = match a.defaulter[p] {
            Some(xva_core::stochastic::Party::Bank) => "bank",
            Some(xva_core::stochastic::Party::Counterparty) => "counterparty",
            None => "none",
        };
        for k in 0..=grid.steps {
            let mut row = vec![
                p.to_string(),
                k.to_string(),
                fmt_f64(grid.t(k)),
                a.stop[p].to_string(),
                who.to_string(),
            ];
            row.extend(a.kinds.iter().map(|&kind| fmt_f64(a.value(kind, p, k).expect("kind"))));
            if full {
                let v = |kind| a.value(kind, p, k).expect("kind");
                row.push(fmt_f64(total_adjustment(
                    v(AdjustmentKind::Cva),
                    v(AdjustmentKind::Dva),
                    v(AdjustmentKind::Fva),
                    v(AdjustmentKind::Colva),
                    v(AdjustmentKind::Mva),
                )));
            }
            t.row(&row);
        }
    }
    Ok(t.into_bytes())
}

/// Initial values of every adjustment and their total, when all were trained.
fn tva_summary(adj: &AdjustmentModel, funding: &FundingModel) -> Option<Vec<u8>> {
    let cva = adj.initial(AdjustmentKind::Cva)?;
    let dva = adj.initial(AdjustmentKind::Dva)?;
    let colva = adj.initial(AdjustmentKind::Colva)?;
    let mva = adj.initial(AdjustmentKind::Mva)?;
    let fva = funding.init;
    let mut t = Table::new(&["component", "value"]);
    for (name, v) in [("cva", cva), ("dva", dva), ("fva", fva), ("colva", colva), ("mva", mva)] {
        t.row(&[name.to_string(), fmt_f64(v)]);
    }
    t.row(&["tva".to_string(), fmt_f64(total_adjustment(cva, dva, fva, colva, mva))]);
    Some(t.into_bytes())
}
