//! Mini-batch training, multi-seed sweeps and loss comparisons.
//!
//! Seed protocol for experiment seed `s`: the clip order is shuffled with
//! seed `s` and the model is initialized with seed `s + 1000`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grid::{LabelGrid, PredictionGrid};
use crate::losses::{
    class_frequency_counts, loss_dispatch_with, ClassFrequency, FbtlPooling, LossSpec,
};
use crate::metrics::{evaluate, fscores, predict_labels, EvalConfig, MetricsReport};
use crate::model::{backward, forward, init_params, ModelDims, ModelParams, ParamGrads};
use crate::optim::{Adam, AdamConfig};

pub const INIT_SEED_OFFSET: u64 = 1000;

/// Where IFL gets its per-class active-frame counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FrequencyScope {
    /// Recounted on every mini-batch.
    #[default]
    Batch,
    /// Counted once over the whole training set.
    Epoch,
}

impl FromStr for FrequencyScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(Self::Batch),
            "epoch" => Ok(Self::Epoch),
            _ => Err(Error::Config(format!("unknown frequency scope {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub epochs: usize,
    pub batch_clips: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub eval: EvalConfig,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub hidden: usize,
    pub window_radius: usize,
    pub ifl_scope: FrequencyScope,
    pub fbtl_pooling: FbtlPooling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossSpec::Bce,
            epochs: 12,
            batch_clips: 8,
            learning_rate: 5e-3,
            seed: 0,
            eval: EvalConfig::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            hidden: 32,
            window_radius: 2,
            ifl_scope: FrequencyScope::Batch,
            fbtl_pooling: FbtlPooling::Batch,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.adam().validate()?;
        if self.epochs == 0 || self.batch_clips == 0 || self.hidden == 0 {
            return Err(Error::Validation(
                "epochs, batch size and hidden width must be positive".into(),
            ));
        }
        EvalConfig::new(self.eval.threshold)?;
        Ok(())
    }

    pub fn with_loss(&self, loss: LossSpec) -> Self {
        Self {
            loss,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean raw batch loss over the epoch's steps.
    pub train_loss: f64,
    pub dev_micro_f: f64,
    pub dev_macro_f: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub final_params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub report: MetricsReport,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,dev_micro_f,dev_macro_f\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch, r.train_loss, r.dev_micro_f, r.dev_macro_f
        ));
    }
    out
}

fn check_compatible(train: &Dataset, dev: &Dataset) -> Result<()> {
    if train.clips.is_empty() || dev.clips.is_empty() {
        return Err(Error::Validation(
            "training and dev sets must be nonempty".into(),
        ));
    }
    if train.feature_dim() != dev.feature_dim() || train.n_classes() != dev.n_classes() {
        return Err(Error::Validation(format!(
            "train set is D={} M={}, dev set is D={} M={}",
            train.feature_dim(),
            train.n_classes(),
            dev.feature_dim(),
            dev.n_classes()
        )));
    }
    Ok(())
}

pub fn model_dims(cfg: &TrainConfig, ds: &Dataset) -> ModelDims {
    ModelDims::new(
        ds.feature_dim(),
        cfg.hidden,
        ds.n_classes(),
        cfg.window_radius,
    )
}

/// Scores for every clip of a dataset.
pub fn predict_dataset(params: &ModelParams, ds: &Dataset) -> Result<Vec<PredictionGrid>> {
    ds.clips
        .iter()
        .map(|c| forward(params, &c.features).map(|(y, _)| y))
        .collect()
}

/// Loss of `params` on the whole dataset treated as one batch.
pub fn dataset_loss(params: &ModelParams, ds: &Dataset, spec: &LossSpec) -> Result<f64> {
    let ys = predict_dataset(params, ds)?;
    let zs: Vec<LabelGrid> = ds.labels().cloned().collect();
    let freq = if spec.needs_class_frequency() {
        Some(class_frequency_counts(&zs)?)
    } else {
        None
    };
    Ok(crate::losses::loss_dispatch(spec, &ys, &zs, freq.as_ref())?.value)
}

fn dev_fscores(params: &ModelParams, dev: &Dataset, eval: &EvalConfig) -> Result<(f64, f64)> {
    let pred = predict_dataset(params, dev)?
        .iter()
        .map(|y| predict_labels(y, eval.threshold))
        .collect::<Vec<_>>();
    let zs: Vec<LabelGrid> = dev.labels().cloned().collect();
    let f = fscores(&pred, &zs)?;
    Ok((f.micro, f.macro_))
}

pub fn train(cfg: &TrainConfig, train_ds: &Dataset, dev_ds: &Dataset) -> Result<RunResult> {
    cfg.validate()?;
    check_compatible(train_ds, dev_ds)?;
    let dims = model_dims(cfg, train_ds);
    let mut params = init_params(cfg.seed.wrapping_add(INIT_SEED_OFFSET), dims)?;
    let mut adam = Adam::new(cfg.adam(), &params)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let epoch_freq: Option<ClassFrequency> =
        if cfg.loss.needs_class_frequency() && cfg.ifl_scope == FrequencyScope::Epoch {
            Some(class_frequency_counts(train_ds.labels())?)
        } else {
            None
        };

    let mut order: Vec<usize> = (0..train_ds.clips.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for (step, batch) in order.chunks(cfg.batch_clips).enumerate() {
            let mut ys = Vec::with_capacity(batch.len());
            let mut caches = Vec::with_capacity(batch.len());
            let mut zs = Vec::with_capacity(batch.len());
            let mut frames = 0usize;
            for &i in batch {
                let clip = &train_ds.clips[i];
                let (y, cache) = forward(&params, &clip.features)?;
                frames += y.n_frames();
                ys.push(y);
                caches.push(cache);
                zs.push(clip.labels.clone());
            }
            let batch_freq = match (&epoch_freq, cfg.loss.needs_class_frequency()) {
                (Some(f), _) => Some(f.clone()),
                (None, true) => Some(class_frequency_counts(&zs)?),
                (None, false) => None,
            };
            let out =
                loss_dispatch_with(&cfg.loss, &ys, &zs, batch_freq.as_ref(), cfg.fbtl_pooling)?;
            if !out.value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {} = {} at epoch {epoch} step {step}, clips {batch:?}, \
                     param norms (w1, b1, w2, b2) = {:?}",
                    cfg.loss,
                    out.value,
                    params.norms()
                )));
            }
            let mut grads = ParamGrads::zeros(dims);
            for (cache, g) in caches.iter().zip(&out.grads) {
                grads.add_assign(&backward(&params, cache, g.view())?);
            }
            grads.scale(1.0 / frames as f64);
            adam.step(&mut params, &grads);
            loss_sum += out.value;
            steps += 1;
        }
        let (dev_micro_f, dev_macro_f) = dev_fscores(&params, dev_ds, &cfg.eval)?;
        history.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / steps as f64,
            dev_micro_f,
            dev_macro_f,
        });
    }

    let ys = predict_dataset(&params, dev_ds)?;
    let zs: Vec<LabelGrid> = dev_ds.labels().cloned().collect();
    let report = evaluate(&ys, &zs, &cfg.eval)?;
    Ok(RunResult {
        final_params: params,
        history,
        report,
    })
}

/// Hyperparameters that [`sweep`] can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    SrlBeta,
    AflZeta,
    AflGamma,
    IflGamma,
    FbtlAlpha,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        SweepAxis::SrlBeta,
        SweepAxis::AflZeta,
        SweepAxis::AflGamma,
        SweepAxis::IflGamma,
        SweepAxis::FbtlAlpha,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::SrlBeta => "srl.beta",
            SweepAxis::AflZeta => "afl.zeta",
            SweepAxis::AflGamma => "afl.gamma",
            SweepAxis::IflGamma => "ifl.gamma",
            SweepAxis::FbtlAlpha => "fbtl.alpha",
        }
    }

    /// Loss at `value` along this axis. Other hyperparameters come from
    /// `base` when it is of the same family, else from the loss defaults
    /// (`alpha = 1` for SRL, the other focusing factor 0 for AFL, `C = 500`,
    /// and `gamma = 0, eta = 1` for FBTL).
    pub fn apply(&self, base: &LossSpec, value: f64) -> LossSpec {
        match (*self, *base) {
            (SweepAxis::SrlBeta, LossSpec::Srl { alpha, .. }) => {
                LossSpec::Srl { alpha, beta: value }
            }
            (SweepAxis::SrlBeta, _) => LossSpec::srl(value),
            (SweepAxis::AflZeta, LossSpec::Afl { gamma, .. }) => LossSpec::afl(gamma, value),
            (SweepAxis::AflZeta, _) => LossSpec::afl(0.0, value),
            (SweepAxis::AflGamma, LossSpec::Afl { zeta, .. }) => LossSpec::afl(value, zeta),
            (SweepAxis::AflGamma, _) => LossSpec::afl(value, 0.0),
            (SweepAxis::IflGamma, LossSpec::Ifl { c, .. }) => LossSpec::Ifl { gamma: value, c },
            (SweepAxis::IflGamma, _) => LossSpec::ifl(value),
            (SweepAxis::FbtlAlpha, LossSpec::Fbtl { gamma, eta, .. }) => LossSpec::Fbtl {
                alpha: value,
                beta: 1.0 - value,
                gamma,
                eta,
            },
            (SweepAxis::FbtlAlpha, _) => LossSpec::fbtl(value, 1.0 - value, 0.0),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown sweep axis {s:?}; expected one of {}",
                    Self::ALL.map(|a| a.name()).join(", ")
                ))
            })
    }
}

/// One training run inside a sweep or comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: String,
    pub loss: LossSpec,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub report: MetricsReport,
}

impl RunRecord {
    /// `key=value` hyperparameters plus the seed, space separated.
    pub fn params_field(&self) -> String {
        let mut parts: Vec<String> = self
            .loss
            .params()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        parts.push(format!("seed={}", self.seed));
        parts.join(" ")
    }

    pub fn run_name(&self) -> String {
        format!(
            "{}_seed{}",
            self.loss.to_string().replace(':', "_"),
            self.seed
        )
    }
}

/// Mean, sample standard deviation, and median of a set of runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub stdev: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                stdev: f64::NAN,
                median: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let stdev = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        Self {
            mean,
            stdev,
            median,
        }
    }
}

/// Seed-aggregated metrics of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub method: String,
    pub loss: LossSpec,
    pub runs: usize,
    pub micro_f: Summary,
    pub macro_f: Summary,
    pub micro_auc: Summary,
    pub macro_auc: Summary,
}

impl AggregateRow {
    fn from_runs(method: String, loss: LossSpec, runs: &[RunRecord]) -> Self {
        let col = |f: fn(&MetricsReport) -> f64| {
            Summary::of(&runs.iter().map(|r| f(&r.report)).collect::<Vec<_>>())
        };
        Self {
            method,
            loss,
            runs: runs.len(),
            micro_f: col(|r| r.micro_f),
            macro_f: col(|r| r.macro_f),
            micro_auc: col(|r| r.micro_auc),
            macro_auc: col(|r| r.macro_auc),
        }
    }
}

pub const AGGREGATE_CSV_HEADER: &str = "method,params,runs,\
mean_micro_f,std_micro_f,median_micro_f,\
mean_macro_f,std_macro_f,median_macro_f,\
mean_micro_auc,std_micro_auc,median_micro_auc,\
mean_macro_auc,std_macro_auc,median_macro_auc";

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = format!("{AGGREGATE_CSV_HEADER}\n");
    for r in rows {
        let params = r
            .loss
            .params()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        out.push_str(&format!("{},{},{}", r.method, params, r.runs));
        for s in [r.micro_f, r.macro_f, r.micro_auc, r.macro_auc] {
            out.push_str(&format!(",{},{},{}", s.mean, s.stdev, s.median));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    /// One row per method (comparison) or per swept value (sweep).
    pub rows: Vec<AggregateRow>,
    /// Every run, ordered by row then seed.
    pub runs: Vec<RunRecord>,
}

impl ExperimentResult {
    pub fn metrics_csv(&self, class_names: &[String]) -> String {
        let mut out = crate::metrics::report_csv_header(class_names);
        out.push('\n');
        for r in &self.runs {
            out.push_str(&crate::metrics::report_csv_row(
                &r.method,
                &r.params_field(),
                &r.report,
            ));
            out.push('\n');
        }
        out
    }
}

/// Trains every `(config, seed)` pair, on up to `workers` threads. The
/// output order depends only on the input order.
fn run_grid(
    jobs: Vec<(String, TrainConfig)>,
    seeds: usize,
    train_ds: &Dataset,
    dev_ds: &Dataset,
    workers: usize,
) -> Result<ExperimentResult> {
    if seeds == 0 {
        return Err(Error::Config("need at least one seed".into()));
    }
    let expanded: Vec<(String, TrainConfig)> = jobs
        .iter()
        .flat_map(|(m, cfg)| (0..seeds as u64).map(move |s| (m.clone(), cfg.with_seed(s))))
        .collect();
    let run_one = |(method, cfg): &(String, TrainConfig)| -> Result<RunRecord> {
        let r = train(cfg, train_ds, dev_ds)?;
        Ok(RunRecord {
            method: method.clone(),
            loss: cfg.loss,
            seed: cfg.seed,
            history: r.history,
            report: r.report,
        })
    };
    let runs: Vec<RunRecord> = if workers <= 1 {
        expanded.iter().map(run_one).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        pool.install(|| expanded.par_iter().map(run_one).collect::<Result<_>>())?
    };
    let rows = jobs
        .iter()
        .zip(runs.chunks(seeds))
        .map(|((method, cfg), chunk)| AggregateRow::from_runs(method.clone(), cfg.loss, chunk))
        .collect();
    Ok(ExperimentResult { rows, runs })
}

/// Trains `base` with the loss varied along `axis`, over seeds `0..seeds`.
pub fn sweep(
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[f64],
    seeds: usize,
    train_ds: &Dataset,
    dev_ds: &Dataset,
    workers: usize,
) -> Result<ExperimentResult> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let jobs = values
        .iter()
        .map(|&v| {
            let loss = axis.apply(&base.loss, v);
            loss.validate()?;
            Ok((format!("{axis}={v}"), base.with_loss(loss)))
        })
        .collect::<Result<Vec<_>>>()?;
    run_grid(jobs, seeds, train_ds, dev_ds, workers)
}

/// Trains each configuration over seeds `0..seeds` and aggregates per method.
pub fn compare_losses(
    cfgs: &[TrainConfig],
    seeds: usize,
    train_ds: &Dataset,
    dev_ds: &Dataset,
    workers: usize,
) -> Result<ExperimentResult> {
    if cfgs.is_empty() {
        return Err(Error::Config("comparison needs at least one method".into()));
    }
    let jobs = cfgs
        .iter()
        .map(|c| (c.loss.to_string(), c.clone()))
        .collect();
    run_grid(jobs, seeds, train_ds, dev_ds, workers)
}
