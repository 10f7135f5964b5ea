//! Alternating full-batch training with RMSProp step sizes, best-epoch early
//! stopping, and validation-based selection of `lambda`.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{DataSplit, Observation};
use crate::error::{Error, Result};
use crate::evaluation::rmse;
use crate::gradients::{backward, objective};
use crate::model::{Model, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmspropConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for RmspropConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            decay: 0.9,
            epsilon: 1e-8,
        }
    }
}

impl RmspropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.decay > 0.0 && self.decay < 1.0) || !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "rmsprop needs learning_rate > 0, decay in (0, 1), epsilon > 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// One update of a flat parameter slice:
/// `s <- decay s + (1 - decay) g^2`, `p <- p - lr g / sqrt(s + eps)`.
pub fn rmsprop_step(
    params: &mut [f64],
    grads: &[f64],
    mean_square: &mut [f64],
    config: &RmspropConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != mean_square.len() {
        return Err(Error::Dimension(format!(
            "rmsprop shapes differ: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            mean_square.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            location: format!("gradient[{i}]"),
        });
    }
    let RmspropConfig {
        learning_rate,
        decay,
        epsilon,
    } = *config;
    for ((p, &g), s) in params.iter_mut().zip(grads).zip(mean_square.iter_mut()) {
        *s = decay * *s + (1.0 - decay) * g * g;
        *p -= learning_rate * g / (*s + epsilon).sqrt();
    }
    Ok(())
}

/// Squared-gradient accumulators for the blocks of one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct RmspropState {
    pub group: ParamGroup,
    pub mean_square: Vec<Vec<f64>>,
    pub config: RmspropConfig,
}

impl RmspropState {
    pub fn new<M: Model>(model: &M, group: ParamGroup, config: RmspropConfig) -> Self {
        let mean_square = model
            .blocks()
            .iter()
            .filter(|b| b.group == group)
            .map(|b| vec![0.0; b.data.len()])
            .collect();
        Self {
            group,
            mean_square,
            config,
        }
    }

    pub fn step<M: Model>(&mut self, model: &mut M, grad: &M) -> Result<()> {
        let grads = grad.blocks();
        let blocks = model
            .blocks_mut()
            .into_iter()
            .zip(grads)
            .filter(|(p, _)| p.group == self.group);
        for ((p, g), s) in blocks.zip(self.mean_square.iter_mut()) {
            rmsprop_step(p.data, g.data, s, &self.config)
                .map_err(|e| match e {
                    Error::NonFinite { location } => Error::NonFinite {
                        location: format!("{} {location}", p.name),
                    },
                    other => other,
                })?;
        }
        Ok(())
    }
}

/// How each phase turns a gradient into a parameter update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    Rmsprop(RmspropConfig),
    /// Fixed-step gradient descent.
    Plain { learning_rate: f64 },
}

enum Stepper {
    Rmsprop(RmspropState),
    Plain(ParamGroup, f64),
}

impl Stepper {
    fn new<M: Model>(rule: &StepRule, model: &M, group: ParamGroup) -> Self {
        match *rule {
            StepRule::Rmsprop(cfg) => Stepper::Rmsprop(RmspropState::new(model, group, cfg)),
            StepRule::Plain { learning_rate } => Stepper::Plain(group, learning_rate),
        }
    }

    fn step<M: Model>(&mut self, model: &mut M, grad: &M) -> Result<()> {
        match self {
            Stepper::Rmsprop(state) => state.step(model, grad),
            Stepper::Plain(group, lr) => {
                for (p, g) in model.blocks_mut().into_iter().zip(grad.blocks()) {
                    if p.group == *group {
                        p.data.iter_mut().zip(g.data).for_each(|(x, d)| *x -= *lr * d);
                    }
                }
                Ok(())
            }
        }
    }
}

/// Alternation and stopping rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSchedule {
    /// Full-batch steps on the network per epoch.
    pub network_steps: usize,
    /// Full-batch steps on the latent features per epoch.
    pub feature_steps: usize,
    pub max_epochs: usize,
    /// Epochs without a `min_delta` improvement in validation RMSE before
    /// stopping.
    pub patience: usize,
    pub min_delta: f64,
    /// Training triples per step; 0 means full batch. Mini-batches are
    /// consecutive slices of the training set, cycled in order.
    pub batch_size: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            network_steps: 1,
            feature_steps: 1,
            max_epochs: 5000,
            patience: 50,
            min_delta: 1e-5,
            batch_size: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.network_steps == 0 || self.feature_steps == 0 {
            return Err(Error::InvalidConfig("steps per phase must be >= 1".into()));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::InvalidConfig("max_epochs and patience must be >= 1".into()));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::InvalidConfig("min_delta must be >= 0".into()));
        }
        Ok(())
    }
}

/// One row of the training trace. Epoch 0 describes the initial parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Objective when the network phase began (NaN for epoch 0).
    pub network_phase_objective: f64,
    /// Objective when the feature phase began (NaN for epoch 0).
    pub feature_phase_objective: f64,
    pub train_objective: f64,
    pub train_rmse: f64,
    pub validation_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainingTrace {
    pub const CSV_HEADER: &'static str =
        "epoch,network_phase_objective,feature_phase_objective,train_objective,train_rmse,validation_rmse";

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{}", Self::CSV_HEADER).unwrap();
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch,
                r.network_phase_objective,
                r.feature_phase_objective,
                r.train_objective,
                r.train_rmse,
                r.validation_rmse
            )
            .unwrap();
        }
        out
    }
}

/// A finished run: the best-validation parameters and the trace that led
/// to them.
#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub trace: TrainingTrace,
    pub best_epoch: usize,
    pub best_validation_rmse: f64,
}

/// Parameters either side of one phase; passed to the observer of
/// [`train_observed`].
pub struct PhaseEvent<'a, M> {
    pub epoch: usize,
    pub group: ParamGroup,
    pub before: &'a M,
    pub after: &'a M,
}

pub type PhaseObserver<'o, M> = dyn FnMut(&PhaseEvent<'_, M>) + 'o;

fn rmse_on<M: Model>(model: &M, data: &crate::data::ObservationSet) -> f64 {
    rmse(&model.predict_batch(data.triples()), &data.values()).unwrap_or(f64::NAN)
}

/// Training objective and training RMSE from a single prediction pass.
fn train_stats<M: Model>(model: &M, data: &crate::data::ObservationSet, lambda: f64) -> (f64, f64) {
    let preds = model.predict_batch(data.triples());
    let sse: f64 = preds
        .iter()
        .zip(data.triples())
        .map(|(p, o)| (p - o.value) * (p - o.value))
        .sum();
    let n = data.len().max(1) as f64;
    (sse + lambda * model.feature_penalty(), (sse / n).sqrt())
}

pub fn train<M: Model>(
    model: M,
    split: &DataSplit,
    lambda: f64,
    schedule: &TrainSchedule,
    rule: &StepRule,
) -> Result<TrainOutcome<M>> {
    train_observed(model, split, lambda, schedule, rule, None)
}

/// Like [`train`], calling `observer` around every phase.
pub fn train_observed<M: Model>(
    mut model: M,
    split: &DataSplit,
    lambda: f64,
    schedule: &TrainSchedule,
    rule: &StepRule,
    mut observer: Option<&mut PhaseObserver<'_, M>>,
) -> Result<TrainOutcome<M>> {
    schedule.validate()?;
    if let StepRule::Rmsprop(cfg) = rule {
        cfg.validate()?;
    }
    let train = split.train.triples();
    model.check_observations(train)?;
    model.check_observations(split.validation.triples())?;

    let phases = [
        (ParamGroup::Network, schedule.network_steps),
        (ParamGroup::Features, schedule.feature_steps),
    ];
    let batches: Vec<&[Observation]> = if schedule.batch_size == 0 || schedule.batch_size >= train.len() {
        vec![train]
    } else {
        train.chunks(schedule.batch_size).collect()
    };
    let full_batch = batches.len() == 1;
    let mut next_batch = 0;
    let mut steppers: Vec<Stepper> = phases
        .iter()
        .map(|(group, _)| Stepper::new(rule, &model, *group))
        .collect();

    objective(&model, train, lambda)?;
    let (train_objective, train_rmse) = train_stats(&model, &split.train, lambda);
    let initial = EpochRecord {
        epoch: 0,
        network_phase_objective: f64::NAN,
        feature_phase_objective: f64::NAN,
        train_objective,
        train_rmse,
        validation_rmse: rmse_on(&model, &split.validation),
    };
    if !initial.train_objective.is_finite() || !initial.validation_rmse.is_finite() {
        return Err(Error::Diverged { last_finite_epoch: 0 });
    }
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_rmse = initial.validation_rmse;
    let mut reference = best_rmse;
    let mut stale = 0;
    let mut trace = TrainingTrace {
        records: vec![initial],
    };

    for epoch in 1..=schedule.max_epochs {
        let diverged = || Error::Diverged {
            last_finite_epoch: epoch - 1,
        };
        let mut phase_objectives = [f64::NAN; 2];
        for ((group, steps), (stepper, phase_obj)) in phases
            .iter()
            .zip(steppers.iter_mut().zip(phase_objectives.iter_mut()))
        {
            let before = observer.as_ref().map(|_| model.clone());
            if model.num_params(*group) == 0 || !full_batch {
                *phase_obj = objective(&model, train, lambda)?;
            }
            if model.num_params(*group) > 0 {
                for step in 0..*steps {
                    let batch = batches[next_batch];
                    next_batch = (next_batch + 1) % batches.len();
                    // The penalty is spread over the batches of one pass.
                    let batch_lambda = if full_batch {
                        lambda
                    } else {
                        lambda * batch.len() as f64 / train.len() as f64
                    };
                    let (grad, value) = match backward(&model, batch, batch_lambda) {
                        Ok(r) => r,
                        Err(Error::NonFinite { .. }) => return Err(diverged()),
                        Err(e) => return Err(e),
                    };
                    if step == 0 && full_batch {
                        *phase_obj = value;
                    }
                    if let Err(e) = stepper.step(&mut model, &grad) {
                        return Err(match e {
                            Error::NonFinite { .. } => diverged(),
                            other => other,
                        });
                    }
                }
            }
            if let (Some(obs), Some(before)) = (observer.as_mut(), before.as_ref()) {
                obs(&PhaseEvent {
                    epoch,
                    group: *group,
                    before,
                    after: &model,
                });
            }
        }

        let (train_objective, train_rmse) = train_stats(&model, &split.train, lambda);
        let record = EpochRecord {
            epoch,
            network_phase_objective: phase_objectives[0],
            feature_phase_objective: phase_objectives[1],
            train_objective,
            train_rmse,
            validation_rmse: rmse_on(&model, &split.validation),
        };
        if !record.train_objective.is_finite() || !record.validation_rmse.is_finite() {
            return Err(diverged());
        }
        let val = record.validation_rmse;
        trace.records.push(record);

        if val < best_rmse {
            best_rmse = val;
            best_epoch = epoch;
            best = model.clone();
        }
        if val < reference - schedule.min_delta {
            reference = val;
            stale = 0;
        } else {
            stale += 1;
            if stale >= schedule.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        model: best,
        trace,
        best_epoch,
        best_validation_rmse: best_rmse,
    })
}

/// Candidate regularization strengths, strictly increasing and `>= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaGrid(Vec<f64>);

impl LambdaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidConfig("lambda grid is empty".into()));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda grid {values:?} has invalid entries")));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "lambda grid {values:?} is not strictly increasing"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl Default for LambdaGrid {
    fn default() -> Self {
        Self(vec![0.0, 0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 10.0, 50.0])
    }
}

/// Result of one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaRun {
    pub lambda: f64,
    /// `(best epoch, best validation RMSE)`, or the failure message.
    pub result: std::result::Result<(usize, f64), String>,
}

#[derive(Debug, Clone)]
pub struct LambdaSelection<M> {
    pub lambda: f64,
    pub outcome: TrainOutcome<M>,
    pub runs: Vec<LambdaRun>,
}

impl<M> LambdaSelection<M> {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,status,best_epoch,best_validation_rmse,selected\n");
        for run in &self.runs {
            let selected = run.lambda == self.lambda;
            match &run.result {
                Ok((epoch, val)) => {
                    writeln!(out, "{},ok,{epoch},{val},{selected}", run.lambda).unwrap()
                }
                Err(msg) => writeln!(out, "{},\"{}\",,,false", run.lambda, msg.replace('"', "\"\"")).unwrap(),
            }
        }
        out
    }
}

/// Trains one copy of `init` per grid value and keeps the one with the
/// lowest best-epoch validation RMSE. Ties go to the larger `lambda`.
/// Up to `jobs` grid points train concurrently; results do not depend on
/// `jobs`.
pub fn select_lambda<M: Model>(
    init: &M,
    split: &DataSplit,
    grid: &LambdaGrid,
    schedule: &TrainSchedule,
    rule: &StepRule,
    jobs: usize,
) -> Result<LambdaSelection<M>> {
    let run = |&lambda: &f64| train(init.clone(), split, lambda, schedule, rule);
    let outcomes: Vec<Result<TrainOutcome<M>>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| grid.values().par_iter().map(run).collect())
    } else {
        grid.values().iter().map(run).collect()
    };

    let mut runs = Vec::with_capacity(outcomes.len());
    let mut best: Option<(f64, TrainOutcome<M>)> = None;
    for (&lambda, outcome) in grid.values().iter().zip(outcomes) {
        match outcome {
            Ok(out) => {
                runs.push(LambdaRun {
                    lambda,
                    result: Ok((out.best_epoch, out.best_validation_rmse)),
                });
                let better = best
                    .as_ref()
                    .is_none_or(|(_, b)| out.best_validation_rmse <= b.best_validation_rmse);
                if better {
                    best = Some((lambda, out));
                }
            }
            Err(e @ (Error::Diverged { .. } | Error::NonFinite { .. })) => runs.push(LambdaRun {
                lambda,
                result: Err(e.to_string()),
            }),
            Err(e) => return Err(e),
        }
    }
    match best {
        Some((lambda, outcome)) => Ok(LambdaSelection {
            lambda,
            outcome,
            runs,
        }),
        None => Err(Error::AllRunsDiverged(runs.len())),
    }
}
