//! RMSE and the repeated hold-out experiment: for each repeat, split, select
//! `lambda` and the stopping epoch on validation, then score the test set.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::time::Instant;

use crate::data::{child_seed, split_indices, DataSplit, Observation, ObservationSet, SplitSpec};
use crate::error::{Error, Result};
use crate::latent::InitSpec;
use crate::model::{Model, ModelKind};
use crate::optimizer::{select_lambda, LambdaGrid, LambdaRun, LambdaSelection, RmspropConfig, StepRule, TrainSchedule};
use crate::registry::{AnyModel, ModelConfig};

/// Root mean squared error between equal-length, non-empty slices.
pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyObservations);
    }
    let sse: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sse / predictions.len() as f64).sqrt())
}

/// Affine map between the native value scale and the `[0, 1]` range of a
/// logistic output: `scaled = (x - lo) / (hi - lo)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetScaling {
    pub lo: f64,
    pub hi: f64,
}

impl TargetScaling {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "target range [{lo}, {hi}] must be finite with hi > lo"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn to_unit(&self, x: f64) -> f64 {
        (x - self.lo) / (self.hi - self.lo)
    }

    pub fn from_unit(&self, y: f64) -> f64 {
        self.lo + (self.hi - self.lo) * y
    }

    pub fn apply(&self, data: &ObservationSet) -> Result<ObservationSet> {
        let triples = data
            .triples()
            .iter()
            .map(|o| Observation::new(o.row, o.col, self.to_unit(o.value)))
            .collect();
        ObservationSet::new(data.n_rows(), data.n_cols(), triples)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub init: InitSpec,
    pub split: SplitSpec,
    pub grid: LambdaGrid,
    pub schedule: TrainSchedule,
    pub rmsprop: RmspropConfig,
    /// Concurrent grid points per repeat.
    pub jobs: usize,
    /// Clamp test predictions to the training value range before scoring.
    pub clamp: bool,
    /// Native value range for models with a logistic output; the observed
    /// range of the data when unset.
    pub target_range: Option<(f64, f64)>,
}

impl ExperimentConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            init: InitSpec::default(),
            split: SplitSpec {
                test_fraction: 0.1,
                validation_fraction: 0.02,
                n_repeats: 5,
                seed: 0,
            },
            grid: LambdaGrid::default(),
            schedule: TrainSchedule::default(),
            rmsprop: RmspropConfig::default(),
            jobs: 1,
            clamp: false,
            target_range: None,
        }
    }

    /// `key = value` lines describing every setting.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("model", self.model.kind().to_string());
        match &self.model {
            ModelConfig::Nnmf {
                d,
                d_prime,
                k,
                layer_dims,
            } => {
                kv("d", d.to_string());
                kv("d_prime", d_prime.to_string());
                kv("k", k.to_string());
                kv("layer_dims", format!("{layer_dims:?}"));
            }
            ModelConfig::Pmf { d } | ModelConfig::BiasedMf { d } => kv("d", d.to_string()),
            ModelConfig::Ntn {
                d,
                hidden,
                output_sigmoid,
            } => {
                kv("d", d.to_string());
                kv("hidden", hidden.to_string());
                kv("output_sigmoid", output_sigmoid.to_string());
            }
        }
        kv("feature_std", self.init.feature_std.to_string());
        kv("init_seed", self.init.seed.to_string());
        kv("test_fraction", self.split.test_fraction.to_string());
        kv("validation_fraction", self.split.validation_fraction.to_string());
        kv("repeats", self.split.n_repeats.to_string());
        kv("split_seed", self.split.seed.to_string());
        kv("lambdas", format!("{:?}", self.grid.values()));
        kv("network_steps", self.schedule.network_steps.to_string());
        kv("feature_steps", self.schedule.feature_steps.to_string());
        kv("max_epochs", self.schedule.max_epochs.to_string());
        kv("patience", self.schedule.patience.to_string());
        kv("min_delta", self.schedule.min_delta.to_string());
        kv("learning_rate", self.rmsprop.learning_rate.to_string());
        kv("rmsprop_decay", self.rmsprop.decay.to_string());
        kv("rmsprop_epsilon", self.rmsprop.epsilon.to_string());
        kv("jobs", self.jobs.to_string());
        kv("clamp", self.clamp.to_string());
        if let Some((lo, hi)) = self.target_range {
            kv("target_range", format!("[{lo}, {hi}]"));
        }
        kv("version", env!("CARGO_PKG_VERSION").to_string());
        out
    }

    /// Initialization seed for repeat `r`.
    pub fn repeat_init(&self, repeat: usize) -> InitSpec {
        InitSpec {
            feature_std: self.init.feature_std,
            seed: child_seed(self.init.seed, repeat as u64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepeatOutcome {
    pub lambda: f64,
    pub best_epoch: usize,
    pub validation_rmse: f64,
    pub test_rmse: f64,
    /// Every grid point tried for this repeat.
    pub runs: Vec<LambdaRun>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepeatReport {
    pub repeat: usize,
    pub outcome: std::result::Result<RepeatOutcome, String>,
    /// Triples shared between the test partition and the training or
    /// validation partitions (always zero).
    pub leaked_test_triples: usize,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub model_kind: ModelKind,
    pub repeats: Vec<RepeatReport>,
    pub config_snapshot: String,
}

impl ExperimentReport {
    pub fn test_rmses(&self) -> Vec<f64> {
        self.repeats
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok().map(|o| o.test_rmse))
            .collect()
    }

    /// Mean test RMSE over successful repeats.
    pub fn mean_test_rmse(&self) -> Option<f64> {
        let v = self.test_rmses();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Sample standard deviation of the test RMSE over successful repeats.
    pub fn std_test_rmse(&self) -> Option<f64> {
        let v = self.test_rmses();
        if v.len() < 2 {
            return None;
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (v.len() - 1) as f64;
        Some(var.sqrt())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "model,repeat,status,lambda,best_epoch,validation_rmse,test_rmse,wall_clock_secs\n",
        );
        for r in &self.repeats {
            match &r.outcome {
                Ok(o) => writeln!(
                    out,
                    "{},{},ok,{},{},{},{},{:.3}",
                    self.model_kind, r.repeat, o.lambda, o.best_epoch, o.validation_rmse, o.test_rmse, r.wall_clock_secs
                ),
                Err(msg) => writeln!(
                    out,
                    "{},{},\"failed: {}\",,,,,{:.3}",
                    self.model_kind,
                    r.repeat,
                    msg.replace('"', "\"\""),
                    r.wall_clock_secs
                ),
            }
            .unwrap();
        }
        out
    }

    /// One row per repeat and grid point. Validation RMSE here is on the
    /// training scale.
    pub fn sweep_csv(&self) -> String {
        let mut out = String::from("model,repeat,lambda,status,best_epoch,validation_rmse,selected\n");
        for r in &self.repeats {
            let Ok(o) = &r.outcome else { continue };
            for run in &o.runs {
                match &run.result {
                    Ok((epoch, val)) => writeln!(
                        out,
                        "{},{},{},ok,{epoch},{val},{}",
                        self.model_kind,
                        r.repeat,
                        run.lambda,
                        run.lambda == o.lambda
                    ),
                    Err(msg) => writeln!(
                        out,
                        "{},{},{},\"{}\",,,false",
                        self.model_kind,
                        r.repeat,
                        run.lambda,
                        msg.replace('"', "\"\"")
                    ),
                }
                .unwrap();
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<8} {:>8} {:>8} {:>10} {:>10}", "repeat", "lambda", "epoch", "val_rmse", "test_rmse").unwrap();
        for r in &self.repeats {
            match &r.outcome {
                Ok(o) => writeln!(
                    out,
                    "{:<8} {:>8} {:>8} {:>10.4} {:>10.4}",
                    r.repeat, o.lambda, o.best_epoch, o.validation_rmse, o.test_rmse
                ),
                Err(msg) => writeln!(out, "{:<8} FAILED: {msg}", r.repeat),
            }
            .unwrap();
        }
        let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        writeln!(
            out,
            "{}: mean test RMSE {} (sd {}) over {} of {} repeats",
            self.model_kind,
            fmt(self.mean_test_rmse()),
            fmt(self.std_test_rmse()),
            self.test_rmses().len(),
            self.repeats.len()
        )
        .unwrap();
        out
    }
}

fn count_leaks(split: &DataSplit) -> usize {
    let seen: HashSet<usize> = split
        .indices
        .train
        .iter()
        .chain(&split.indices.validation)
        .copied()
        .collect();
    split.indices.test.iter().filter(|i| seen.contains(i)).count()
}

/// The value scaling a configuration trains under, if any.
pub fn target_scaling(config: &ExperimentConfig, data: &ObservationSet) -> Result<Option<TargetScaling>> {
    if !config.model.bounded_output() {
        return Ok(None);
    }
    let (lo, hi) = config.target_range.unwrap_or_else(|| data.value_range());
    TargetScaling::new(lo, hi).map(Some)
}

/// Test-set RMSE on the native scale, optionally clamping predictions to
/// the training value range.
pub fn score<M: Model>(
    model: &M,
    test: &ObservationSet,
    scaling: Option<TargetScaling>,
    clamp_to: Option<(f64, f64)>,
) -> Result<f64> {
    model.check_observations(test.triples())?;
    let mut preds = model.predict_batch(test.triples());
    if let Some(s) = scaling {
        preds.iter_mut().for_each(|p| *p = s.from_unit(*p));
    }
    if let Some((lo, hi)) = clamp_to {
        preds.iter_mut().for_each(|p| *p = p.clamp(lo, hi));
    }
    rmse(&preds, &test.values())
}

/// One repeat of the protocol on a given split: select `lambda` on the
/// validation set, keep the best epoch, score the test set.
pub fn run_repeat(
    split: &DataSplit,
    config: &ExperimentConfig,
    init: &InitSpec,
    scaling: Option<TargetScaling>,
) -> Result<(RepeatOutcome, LambdaSelection<AnyModel>)> {
    let scaled;
    let train_split = match scaling {
        Some(s) => {
            scaled = DataSplit {
                train: s.apply(&split.train)?,
                validation: s.apply(&split.validation)?,
                test: s.apply(&split.test)?,
                indices: split.indices.clone(),
            };
            &scaled
        }
        None => split,
    };
    let train_values = train_split.train.values();
    let global_mean = train_values.iter().sum::<f64>() / train_values.len() as f64;
    let model = config
        .model
        .init(split.train.n_rows(), split.train.n_cols(), init, global_mean)?;
    let selection = select_lambda(
        &model,
        train_split,
        &config.grid,
        &config.schedule,
        &StepRule::Rmsprop(config.rmsprop),
        config.jobs,
    )?;
    let clamp_to = config.clamp.then(|| split.train.value_range());
    let test_rmse = score(&selection.outcome.model, &split.test, scaling, clamp_to)?;
    let val_rmse = match scaling {
        Some(s) => s.hi - s.lo,
        None => 1.0,
    } * selection.outcome.best_validation_rmse;
    Ok((
        RepeatOutcome {
            lambda: selection.lambda,
            best_epoch: selection.outcome.best_epoch,
            validation_rmse: val_rmse,
            test_rmse,
            runs: selection.runs.clone(),
        },
        selection,
    ))
}

/// The full protocol: `n_repeats` independent splits, each with its own
/// `lambda` selection. Failed repeats are reported, not fatal.
pub fn run_experiment(data: &ObservationSet, config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.split.validate()?;
    config.model.validate()?;
    let scaling = target_scaling(config, data)?;
    let mut repeats = Vec::with_capacity(config.split.n_repeats);
    for r in 0..config.split.n_repeats {
        let start = Instant::now();
        let split = DataSplit::from_indices(data, split_indices(data.len(), &config.split, r)?)?;
        let leaked = count_leaks(&split);
        let outcome = if leaked > 0 {
            Err(format!("{leaked} test triples also in train/validation"))
        } else {
            run_repeat(&split, config, &config.repeat_init(r), scaling)
                .map(|(o, _)| o)
                .map_err(|e| e.to_string())
        };
        repeats.push(RepeatReport {
            repeat: r,
            outcome,
            leaked_test_triples: leaked,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        });
    }
    Ok(ExperimentReport {
        model_kind: config.model.kind(),
        repeats,
        config_snapshot: config.snapshot(),
    })
}
