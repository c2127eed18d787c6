//! Initial margin as conditional value-at-risk of the clean portfolio value
//! change over the margin period of risk, learned per grid step by quantile
//! (pinball) regression.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    AdamConfig, AdamState, AutodiffError, Container, ContainerError, Graph, MlpArch, MlpParams, Tensor,
};
use crate::deep_bsde::{CleanPaths, TrainingCurve};
use crate::stochastic::{derive_seed, PathBatch};

#[derive(Debug, thiserror::Error)]
pub enum ImError {
    #[error("invalid margin setup: {0}")]
    Config(String),
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// Confidence level and margin period of risk in grid steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskMeasure {
    pub alpha: f64,
    pub mpr: usize,
}

impl RiskMeasure {
    pub fn validate(&self) -> Result<(), ImError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) || self.mpr == 0 {
            return Err(ImError::Config(format!(
                "need alpha in (0, 1) and a positive margin period, got {} and {}",
                self.alpha, self.mpr
            )));
        }
        Ok(())
    }

    /// Look-ahead at step `n`, truncated at the horizon.
    pub fn horizon(&self, n: usize, steps: usize) -> usize {
        self.mpr.min(steps.saturating_sub(n))
    }
}

/// Check function `max(alpha (x - q), (alpha - 1)(x - q))`.
pub fn pinball(alpha: f64, q: f64, x: f64) -> f64 {
    let u = x - q;
    (alpha * u).max((alpha - 1.0) * u)
}

/// Lower order statistic: the `ceil(alpha M)`-th smallest sample.
pub fn empirical_quantile(samples: &[f64], alpha: f64) -> Result<f64, ImError> {
    if samples.is_empty() {
        return Err(ImError::InsufficientSamples { needed: 1, got: 0 });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ImError::Config(format!("quantile level {alpha} outside [0, 1]")));
    }
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let k = ((alpha * s.len() as f64).ceil() as usize).clamp(1, s.len());
    Ok(s[k - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImTrainConfig {
    pub samples: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl ImTrainConfig {
    pub fn validate(&self) -> Result<(), ImError> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(ImError::Config(
                "batch size, epoch limit and patience must be positive".into(),
            ));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(ImError::Config("validation fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

const MIN_SAMPLES: usize = 8;

/// Standardized two-output quantile network for one grid step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepQuantileNet {
    pub net: MlpParams,
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_scale: f64,
}

impl StepQuantileNet {
    fn standardize(&self, features: &Tensor) -> Tensor {
        standardize(features, &self.input_mean, &self.input_scale)
    }

    /// Raw predictions `(q_plus, q_minus)` in value units.
    pub fn predict(&self, features: &Tensor) -> Result<(Vec<f64>, Vec<f64>), ImError> {
        let out = self.net.predict(&self.standardize(features))?;
        let s = self.output_scale;
        Ok((
            (0..out.rows()).map(|r| s * out.get(r, 0)).collect(),
            (0..out.rows()).map(|r| s * out.get(r, 1)).collect(),
        ))
    }
}

fn standardize(x: &Tensor, mean: &[f64], scale: &[f64]) -> Tensor {
    let c = x.cols();
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(c) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(scale) {
            *v = (*v - m) / s;
        }
    }
    Tensor::new([x.rows(), c], data).expect("same shape")
}

/// Fits `q_plus, q_minus` so that they minimize the pinball loss against
/// `targets_plus, targets_minus`, with early stopping on a trailing validation split.
pub fn fit_quantile_net(
    features: &Tensor,
    targets_plus: &[f64],
    targets_minus: &[f64],
    alpha: f64,
    cfg: &ImTrainConfig,
    seed: u64,
) -> Result<(StepQuantileNet, Vec<f64>), ImError> {
    cfg.validate()?;
    let m = features.rows();
    let f = features.cols();
    if targets_plus.len() != m || targets_minus.len() != m {
        return Err(ImError::Config("targets and features differ in length".into()));
    }
    let n_val = ((m as f64) * cfg.validation_fraction).round() as usize;
    let n_train = m - n_val;
    if m < MIN_SAMPLES || n_val == 0 || n_train == 0 {
        return Err(ImError::InsufficientSamples {
            needed: MIN_SAMPLES,
            got: m,
        });
    }
    let mut mean = vec![0.0; f];
    let mut scale = vec![0.0; f];
    for r in 0..n_train {
        for (a, v) in mean.iter_mut().zip(features.row_slice(r)) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n_train as f64);
    for r in 0..n_train {
        for ((a, v), mu) in scale.iter_mut().zip(features.row_slice(r)).zip(&mean) {
            *a += (v - mu) * (v - mu);
        }
    }
    for s in scale.iter_mut() {
        *s = (*s / n_train as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let rms = (targets_plus[..n_train]
        .iter()
        .chain(&targets_minus[..n_train])
        .map(|v| v * v)
        .sum::<f64>()
        / (2 * n_train) as f64)
        .sqrt();
    let out_scale = if rms > 1e-12 { rms } else { 1.0 };
    let yp: Vec<f64> = targets_plus.iter().map(|v| v / out_scale).collect();
    let ym: Vec<f64> = targets_minus.iter().map(|v| v / out_scale).collect();

    let xs = standardize(features, &mean, &scale);
    let mut net = MlpParams::init(MlpArch::new(f, cfg.hidden.clone(), 2), seed);
    // Start from the unconditional quantiles: zero output weights, bias at the empirical level.
    let last = net.weights.len() - 1;
    net.weights[last].data_mut().iter_mut().for_each(|w| *w = 0.0);
    net.biases[last] = Tensor::row(vec![
        empirical_quantile(&yp[..n_train], alpha)?,
        empirical_quantile(&ym[..n_train], alpha)?,
    ]);

    let val_x = Tensor::new([n_val, f], xs.data()[n_train * f..].to_vec())?;
    let val_loss = |net: &MlpParams| -> Result<f64, ImError> {
        let out = net.predict(&val_x)?;
        let mut s = 0.0;
        for r in 0..n_val {
            s += pinball(alpha, out.get(r, 0), yp[n_train + r]) + pinball(alpha, out.get(r, 1), ym[n_train + r]);
        }
        Ok(s / n_val as f64)
    };

    let mut adam = AdamState::new(&net.tensors(), cfg.adam);
    let mut best = (val_loss(&net)?, net.clone());
    let mut history = vec![best.0];
    let mut since_best = 0;
    let batches: Vec<(usize, usize)> = (0..n_train)
        .step_by(cfg.batch_size)
        .map(|s| (s, (s + cfg.batch_size).min(n_train)))
        .collect();
    for _epoch in 0..cfg.max_epochs {
        for &(s, e) in &batches {
            let rows = e - s;
            let mut g = Graph::new();
            let bound = net.bind(&mut g, true);
            let x = g.constant(Tensor::new([rows, f], xs.data()[s * f..e * f].to_vec())?);
            let out = bound.forward(&mut g, x)?;
            let mut y = Vec::with_capacity(2 * rows);
            for r in s..e {
                y.push(yp[r]);
                y.push(ym[r]);
            }
            let y = g.constant(Tensor::new([rows, 2], y)?);
            let u = g.sub(y, out)?;
            let up = g.pos_part(u)?;
            let un = g.neg_part(u)?;
            let a = g.scale(up, alpha)?;
            let b = g.scale(un, 1.0 - alpha)?;
            let l = g.add(a, b)?;
            let sum = g.sum(l)?;
            let loss = g.scale(sum, 1.0 / rows as f64)?;
            let mut grads = g.backward(loss)?;
            let gl: Vec<Tensor> = bound.nodes().into_iter().map(|id| grads.take(id)).collect();
            drop(g);
            adam.update(&mut net.tensors_mut(), &gl, cfg.learning_rate)?;
        }
        let vl = val_loss(&net)?;
        history.push(vl);
        if vl < best.0 {
            best = (vl, net.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok((
        StepQuantileNet {
            net: best.1,
            input_mean: mean,
            input_scale: scale,
            output_scale: out_scale,
        },
        history,
    ))
}

/// Network inputs at a grid step: underlyings, live contract values and their sum.
pub fn margin_features(x: &[f64], live_values: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(x.len() + live_values.len() + 1);
    f.extend_from_slice(x);
    f.extend_from_slice(live_values);
    f.push(live_values.iter().sum());
    f
}

/// Feature matrix and `(dV)^+`, `(dV)^-` over the margin period at step `n`.
pub fn margin_training_data(
    clean: &CleanPaths,
    paths: &PathBatch,
    underlyings: usize,
    risk: &RiskMeasure,
    n: usize,
) -> Result<(Tensor, Vec<f64>, Vec<f64>), ImError> {
    let k = risk.horizon(n, clean.steps);
    let fdim = underlyings + clean.contracts + 1;
    let mut feats = Vec::with_capacity(clean.n_paths * fdim);
    let mut plus = Vec::with_capacity(clean.n_paths);
    let mut minus = Vec::with_capacity(clean.n_paths);
    for p in 0..clean.n_paths {
        let live: Vec<f64> = (0..clean.contracts).map(|j| clean.live(p, n, j)).collect();
        feats.extend(margin_features(&paths.state(p, n)[..underlyings], &live));
        let dv = clean.portfolio_frozen(p, n + k) - clean.portfolio_frozen(p, n);
        plus.push(dv.max(0.0));
        minus.push((-dv).max(0.0));
    }
    Ok((Tensor::new([clean.n_paths, fdim], feats)?, plus, minus))
}

/// Per-step quantile networks for received (`fc`) and posted (`tc`) margin.
#[derive(Debug, Clone, PartialEq)]
pub struct ImModel {
    pub risk: RiskMeasure,
    pub steps: usize,
    pub underlyings: usize,
    pub contracts: usize,
    pub nets: Vec<StepQuantileNet>,
}

const KIND: &str = "initial-margin";

impl ImModel {
    /// Margins at step `n` for rows of [`margin_features`]: received margin is
    /// non-negative, posted margin non-positive; both vanish at the horizon.
    pub fn eval(&self, n: usize, features: &Tensor) -> Result<(Vec<f64>, Vec<f64>), ImError> {
        if n >= self.steps {
            return Ok((vec![0.0; features.rows()], vec![0.0; features.rows()]));
        }
        let (qp, qm) = self.nets[n].predict(features)?;
        Ok((
            qp.into_iter().map(|v| v.max(0.0)).collect(),
            qm.into_iter().map(|v| -v.max(0.0)).collect(),
        ))
    }

    pub fn eval_point(&self, n: usize, x: &[f64], live_values: &[f64]) -> Result<(f64, f64), ImError> {
        let f = margin_features(x, live_values);
        let (fc, tc) = self.eval(n, &Tensor::row(f))?;
        Ok((fc[0], tc[0]))
    }

    /// Margins along paths, `[path][step 0..=N]`.
    pub fn margin_paths(&self, clean: &CleanPaths, paths: &PathBatch) -> Result<(Vec<f64>, Vec<f64>), ImError> {
        let stride = self.steps + 1;
        let mut fc = vec![0.0; clean.n_paths * stride];
        let mut tc = vec![0.0; clean.n_paths * stride];
        let fdim = self.underlyings + self.contracts + 1;
        for n in 0..self.steps {
            let mut feats = Vec::with_capacity(clean.n_paths * fdim);
            for p in 0..clean.n_paths {
                let live: Vec<f64> = (0..clean.contracts).map(|j| clean.live(p, n, j)).collect();
                feats.extend(margin_features(&paths.state(p, n)[..self.underlyings], &live));
            }
            let (a, b) = self.eval(n, &Tensor::new([clean.n_paths, fdim], feats)?)?;
            for p in 0..clean.n_paths {
                fc[p * stride + n] = a[p];
                tc[p * stride + n] = b[p];
            }
        }
        Ok((fc, tc))
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "risk": self.risk,
            "steps": self.steps,
            "underlyings": self.underlyings,
            "contracts": self.contracts,
            "arch": self.nets.first().map(|n| n.net.arch.clone()),
        });
        let mut c = Container::new(KIND, meta);
        for (n, s) in self.nets.iter().enumerate() {
            s.net.write_arrays(&mut c, &format!("step{n}"));
            c.push(format!("step{n}.mean"), Tensor::row(s.input_mean.clone()));
            c.push(format!("step{n}.scale"), Tensor::row(s.input_scale.clone()));
            c.push(format!("step{n}.out"), Tensor::scalar(s.output_scale));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, ImError> {
        c.expect_kind(KIND)?;
        let get = |k: &str| {
            c.meta
                .get(k)
                .cloned()
                .ok_or_else(|| ImError::Config(format!("metadata lacks `{k}`")))
        };
        let parse = |v: serde_json::Value| -> Result<_, ImError> { Ok(v) };
        let risk: RiskMeasure =
            serde_json::from_value(parse(get("risk")?)?).map_err(|e| ImError::Config(e.to_string()))?;
        let as_usize = |k: &str| -> Result<usize, ImError> {
            get(k)?
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| ImError::Config(format!("`{k}` not an integer")))
        };
        let steps = as_usize("steps")?;
        let arch: Option<MlpArch> = serde_json::from_value(get("arch")?).map_err(|e| ImError::Config(e.to_string()))?;
        let mut nets = Vec::with_capacity(steps);
        if let Some(arch) = arch {
            for n in 0..steps {
                nets.push(StepQuantileNet {
                    net: MlpParams::read_arrays(c, &format!("step{n}"), arch.clone())?,
                    input_mean: c.get(&format!("step{n}.mean"))?.data().to_vec(),
                    input_scale: c.get(&format!("step{n}.scale"))?.data().to_vec(),
                    output_scale: c.get(&format!("step{n}.out"))?.item(),
                });
            }
        }
        Ok(Self {
            risk,
            steps,
            underlyings: as_usize("underlyings")?,
            contracts: as_usize("contracts")?,
            nets,
        })
    }
}

/// Trains one quantile network per grid step `n < N` on the given clean value paths.
pub fn train_margin(
    clean: &CleanPaths,
    paths: &PathBatch,
    underlyings: usize,
    risk: &RiskMeasure,
    cfg: &ImTrainConfig,
    seed: u64,
) -> Result<(ImModel, TrainingCurve), ImError> {
    risk.validate()?;
    cfg.validate()?;
    if clean.n_paths != paths.n_paths || clean.steps != paths.steps {
        return Err(ImError::Config(
            "clean value paths and state paths differ in shape".into(),
        ));
    }
    let needed = 2 * cfg.batch_size.min(clean.n_paths).max(4);
    if clean.n_paths < needed {
        return Err(ImError::InsufficientSamples {
            needed,
            got: clean.n_paths,
        });
    }
    let results: Vec<Result<(StepQuantileNet, Vec<f64>), ImError>> = (0..clean.steps)
        .into_par_iter()
        .map(|n| {
            let (x, plus, minus) = margin_training_data(clean, paths, underlyings, risk, n)?;
            fit_quantile_net(
                &x,
                &plus,
                &minus,
                risk.alpha,
                cfg,
                derive_seed(seed, &format!("margin/init/{n}")),
            )
        })
        .collect();
    let mut nets = Vec::with_capacity(clean.steps);
    let mut curve = TrainingCurve::default();
    for (n, r) in results.into_iter().enumerate() {
        let (net, history) = r?;
        for (e, v) in history.iter().enumerate() {
            curve.push(e, format!("step{n}/validation_pinball"), *v);
        }
        nets.push(net);
    }
    Ok((
        ImModel {
            risk: *risk,
            steps: clean.steps,
            underlyings,
            contracts: clean.contracts,
            nets,
        },
        curve,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinball_values() {
        assert!((pinball(0.99, 0.0, 1.0) - 0.99).abs() < 1e-15);
        assert!((pinball(0.99, 0.0, -1.0) - 0.01).abs() < 1e-15);
        assert_eq!(pinball(0.5, 2.0, 2.0), 0.0);
    }

    #[test]
    fn quantile_lower_order_statistic() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(empirical_quantile(&s, 0.99).unwrap(), 99.0);
        assert_eq!(empirical_quantile(&s, 0.995).unwrap(), 100.0);
        assert_eq!(empirical_quantile(&s, 0.0).unwrap(), 1.0);
        assert_eq!(empirical_quantile(&s, 1.0).unwrap(), 100.0);
        assert!(empirical_quantile(&[], 0.5).is_err());
    }

    #[test]
    fn horizon_truncates() {
        let r = RiskMeasure { alpha: 0.99, mpr: 8 };
        assert_eq!(r.horizon(0, 50), 8);
        assert_eq!(r.horizon(45, 50), 5);
        assert_eq!(r.horizon(49, 50), 1);
    }

    fn small_cfg() -> ImTrainConfig {
        ImTrainConfig {
            samples: 512,
            batch_size: 128,
            max_epochs: 30,
            patience: 5,
            validation_fraction: 0.2,
            hidden: vec![8, 8],
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
        }
    }

    #[test]
    fn constant_targets_give_zero_margin() {
        let x = Tensor::new([512, 2], (0..1024).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let z = vec![0.0; 512];
        let (net, _) = fit_quantile_net(&x, &z, &z, 0.99, &small_cfg(), 1).unwrap();
        let (p, m) = net.predict(&x).unwrap();
        assert!(p.iter().chain(&m).all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let x = Tensor::zeros(3, 1);
        let z = vec![0.0; 3];
        assert!(fit_quantile_net(&x, &z, &z, 0.99, &small_cfg(), 1).is_err());
    }

    #[test]
    fn model_round_trips() {
        let x = Tensor::new([512, 2], (0..1024).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let y: Vec<f64> = (0..512).map(|i| (i as f64 * 0.11).cos().abs()).collect();
        let (net, _) = fit_quantile_net(&x, &y, &y, 0.9, &small_cfg(), 2).unwrap();
        let model = ImModel {
            risk: RiskMeasure { alpha: 0.9, mpr: 2 },
            steps: 1,
            underlyings: 1,
            contracts: 0,
            nets: vec![net],
        };
        let back = ImModel::from_container(&Container::from_bytes(&model.to_container().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, model);
        let (fc, tc) = back.eval(0, &x).unwrap();
        assert!(fc.iter().all(|&v| v >= 0.0));
        assert!(tc.iter().all(|&v| v <= 0.0));
        let (fc, tc) = back.eval(1, &x).unwrap();
        assert!(fc.iter().chain(&tc).all(|&v| v == 0.0));
    }
}
