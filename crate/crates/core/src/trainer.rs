//! Mini-batch AdamW training with dev-loss model selection.
//!
//! Shuffles depend only on `(seed, epoch)` and dropout masks only on
//! `(seed, step, index in batch)`, so a run stopped at any step and resumed
//! from its [`TrainState`] continues exactly as the uninterrupted run.

use msdf_text::Task;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::generator::{Example, GeneratorModel};
use crate::graph::{Graph, Var};
use crate::optim::{AdamConfig, AdamW};
use crate::params::{GradBuffer, ParamStore, Parameterized};
use crate::selector::{SelectorModel, SelectorPair};
use crate::transformer::Dropout;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    PretrainLongerHalf,
    Finetune,
    Selector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Total optimizer steps, counted across resumes.
    pub max_steps: Option<u64>,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Dev evaluation cadence in steps. A run that finishes its epochs is
    /// also evaluated at the end; one cut short by `max_steps` is not, so
    /// that stopping and resuming sees the same evaluations.
    pub eval_every: Option<u64>,
    pub task: Option<Task>,
    pub phase: Phase,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(Phase::Pretrain, None)
    }
}

impl TrainConfig {
    /// Settings for the full-size models.
    pub fn paper(phase: Phase, task: Option<Task>) -> Self {
        let (batch_size, max_epochs) = match task {
            Some(Task::Knowledge) => (16, 15),
            Some(Task::Recommendation) => (2, 10),
            Some(Task::Persona) => (16, 10),
            None => (16, 10),
        };
        Self {
            lr: 2.5e-5,
            adam: AdamConfig::default(),
            batch_size,
            max_epochs,
            max_steps: None,
            grad_clip: None,
            seed: 0,
            eval_every: None,
            task,
            phase,
        }
    }

    /// Settings for the small models trained here.
    pub fn desk(phase: Phase, task: Option<Task>) -> Self {
        Self {
            lr: 3e-4,
            adam: AdamConfig::default(),
            batch_size: 16,
            max_epochs: 5,
            max_steps: None,
            grad_clip: Some(1.0),
            seed: 0,
            eval_every: Some(200),
            task,
            phase,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ModelError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch_size must be at least 1".into()));
        }
        if self.eval_every == Some(0) {
            return Err(ModelError::Config("eval_every must be at least 1".into()));
        }
        if matches!(self.grad_clip, Some(c) if c.is_nan() || c <= 0.0) {
            return Err(ModelError::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// A model that can be trained on examples of one kind.
pub trait Trainable<S: Scalar>: Parameterized<S> + Clone {
    type Example;

    /// Mean loss of one example and the number of positions it averages.
    fn example_loss<'a>(&'a self, g: &mut Graph<'a, S>, ex: &Self::Example, drop: &mut Dropout) -> Result<(Var, usize)>;

    /// Positions `example_loss` averages over, without running the model.
    fn example_count(&self, ex: &Self::Example) -> usize;

    fn dropout_rate(&self) -> f64;
}

impl<S: Scalar> Trainable<S> for GeneratorModel<S> {
    type Example = Example;

    fn example_loss<'a>(&'a self, g: &mut Graph<'a, S>, ex: &Example, drop: &mut Dropout) -> Result<(Var, usize)> {
        self.loss(g, ex, drop)
    }

    fn example_count(&self, ex: &Example) -> usize {
        ex.target.len() + 1
    }

    fn dropout_rate(&self) -> f64 {
        self.config.dropout
    }
}

impl<S: Scalar> Trainable<S> for SelectorModel<S> {
    type Example = SelectorPair;

    fn example_loss<'a>(&'a self, g: &mut Graph<'a, S>, ex: &SelectorPair, drop: &mut Dropout) -> Result<(Var, usize)> {
        Ok((self.loss(g, ex, drop)?, 1))
    }

    fn example_count(&self, _: &SelectorPair) -> usize {
        1
    }

    fn dropout_rate(&self) -> f64 {
        self.config.dropout
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_loss: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState<S: Scalar> {
    pub step: u64,
    pub epoch: usize,
    /// Batches already taken from the current epoch.
    pub batch_in_epoch: usize,
    pub optimizer: AdamW<S>,
    pub best_dev: Option<f64>,
    pub best_step: u64,
    pub best: Option<ParamStore<S>>,
}

impl<S: Scalar> TrainState<S> {
    pub fn new<M: Parameterized<S>>(model: &M, adam: AdamConfig) -> Self {
        Self {
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            optimizer: AdamW::new(adam, model.params()),
            best_dev: None,
            best_step: 0,
            best: None,
        }
    }

    /// Serializable counters (tensors travel separately).
    pub fn meta(&self) -> TrainMeta {
        TrainMeta {
            step: self.step,
            epoch: self.epoch,
            batch_in_epoch: self.batch_in_epoch,
            optimizer_step: self.optimizer.step,
            best_dev: self.best_dev,
            best_step: self.best_step,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub step: u64,
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub optimizer_step: u64,
    pub best_dev: Option<f64>,
    pub best_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Stop {
    /// All epochs ran.
    Completed,
    MaxSteps,
    /// A loss or gradient went non-finite; parameters are the last good ones.
    Diverged { step: u64, reason: String },
}

#[derive(Debug)]
pub struct TrainOutcome<S: Scalar> {
    pub state: TrainState<S>,
    pub log: Vec<LogRecord>,
    pub stop: Stop,
}

impl<S: Scalar> TrainOutcome<S> {
    /// The min-dev parameters, or the final ones without a dev set.
    pub fn best_params<'a>(&'a self, model: &'a impl Parameterized<S>) -> &'a ParamStore<S> {
        self.state.best.as_ref().unwrap_or(model.params())
    }

    pub fn diverged(&self) -> Option<ModelError> {
        match &self.stop {
            Stop::Diverged { step, reason } => Some(ModelError::Diverged {
                step: *step,
                reason: reason.clone(),
            }),
            _ => None,
        }
    }
}

/// Example order of one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn dropout_rng(seed: u64, step: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6472_6f70_6f75_74);
    rng.set_stream((step << 20) | index as u64);
    rng
}

/// Token-weighted mean loss over `examples` without dropout.
pub fn mean_loss<S: Scalar, M: Trainable<S>>(model: &M, examples: &[M::Example]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in examples {
        let mut g = Graph::no_grad();
        let (loss, n) = model.example_loss(&mut g, ex, &mut Dropout::off())?;
        total += g.value(loss).data()[0].as_f64() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(ModelError::Config("loss over an empty set".into()));
    }
    Ok(total / count as f64)
}

/// Loss and accumulated gradients of one batch, weighting every scored
/// position equally.
fn batch_gradients<S: Scalar, M: Trainable<S>>(
    model: &M,
    batch: &[&M::Example],
    seed: u64,
    step: u64,
    grads: &mut GradBuffer<S>,
) -> Result<f64> {
    let rate = model.dropout_rate();
    let total_count: usize = batch.iter().map(|ex| model.example_count(ex)).sum();
    let mut total = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        let mut rng = dropout_rng(seed, step, i);
        let mut drop = Dropout {
            rate,
            rng: Some(&mut rng),
        };
        let mut g = Graph::new();
        let (loss, n) = model.example_loss(&mut g, ex, &mut drop)?;
        let w = n as f64 / total_count as f64;
        let gr = g.backward_scaled(loss, S::lit(w))?;
        grads.accumulate(&gr);
        total += g.value(loss).data()[0].as_f64() * w;
    }
    Ok(total)
}

/// Trains until `max_epochs` or `max_steps`, evaluating on `dev` every
/// `eval_every` steps and at the end. `on_log` sees every record as it is
/// produced.
pub fn train<S: Scalar, M: Trainable<S>>(
    model: &mut M,
    train_set: &[M::Example],
    dev: &[M::Example],
    cfg: &TrainConfig,
    resume: Option<TrainState<S>>,
    on_log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(ModelError::Config("empty training set".into()));
    }
    let mut state = resume.unwrap_or_else(|| TrainState::new(model, cfg.adam.clone()));
    let mut log = Vec::new();
    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let mut grads = GradBuffer::new(model.params());
    let mut last_eval_step = None;

    let evaluate = |model: &M, state: &mut TrainState<S>| -> Result<Option<f64>> {
        if dev.is_empty() {
            return Ok(None);
        }
        let d = mean_loss(model, dev)?;
        if state.best_dev.is_none_or(|b| d < b) {
            state.best_dev = Some(d);
            state.best_step = state.step;
            state.best = Some(model.params().clone());
        }
        Ok(Some(d))
    };

    let stop = 'outer: loop {
        if state.epoch >= cfg.max_epochs {
            break Stop::Completed;
        }
        let order = epoch_order(train_set.len(), cfg.seed, state.epoch);
        while state.batch_in_epoch < batches_per_epoch {
            if cfg.max_steps.is_some_and(|m| state.step >= m) {
                break 'outer Stop::MaxSteps;
            }
            let start = state.batch_in_epoch * cfg.batch_size;
            let batch: Vec<&M::Example> = order[start..(start + cfg.batch_size).min(order.len())]
                .iter()
                .map(|&i| &train_set[i])
                .collect();
            grads.clear();
            let step = state.step + 1;
            let loss = match batch_gradients(model, &batch, cfg.seed, step, &mut grads) {
                Ok(l) => l,
                Err(ModelError::Tensor(e)) => {
                    break 'outer Stop::Diverged {
                        step,
                        reason: e.to_string(),
                    }
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || !grads.is_finite() {
                break 'outer Stop::Diverged {
                    step,
                    reason: format!("non-finite loss {loss} or gradient"),
                };
            }
            let grad_norm = match cfg.grad_clip {
                Some(c) => grads.clip(c),
                None => grads.global_norm(),
            }
            .as_f64();
            let backup = model.params().clone();
            state.optimizer.update(model.params_mut(), &grads, cfg.lr);
            if !model.params().iter().all(|(_, _, t)| t.is_finite()) {
                *model.params_mut() = backup;
                break 'outer Stop::Diverged {
                    step,
                    reason: "non-finite parameters after update".into(),
                };
            }
            state.step = step;
            state.batch_in_epoch += 1;
            let dev_loss = if cfg.eval_every.is_some_and(|e| step.is_multiple_of(e)) {
                last_eval_step = Some(step);
                evaluate(model, &mut state)?
            } else {
                None
            };
            let rec = LogRecord {
                step,
                epoch: state.epoch,
                loss,
                dev_loss,
                lr: cfg.lr,
                grad_norm,
            };
            on_log(&rec);
            log.push(rec);
        }
        state.epoch += 1;
        state.batch_in_epoch = 0;
    };

    if last_eval_step != Some(state.step) && stop == Stop::Completed {
        if let Some(d) = evaluate(model, &mut state)? {
            if let Some(last) = log.last_mut().filter(|r| r.step == state.step) {
                last.dev_loss = Some(d);
                on_log(last);
            } else {
                let rec = LogRecord {
                    step: state.step,
                    epoch: state.epoch,
                    loss: f64::NAN,
                    dev_loss: Some(d),
                    lr: cfg.lr,
                    grad_norm: 0.0,
                };
                on_log(&rec);
                log.push(rec);
            }
        }
    }
    Ok(TrainOutcome { state, log, stop })
}

/// Two-phase pre-training: every pair, then the longer-response half.
/// The second phase starts a fresh optimizer and keeps the best dev loss
/// seen in either phase.
pub fn pretrain<S: Scalar>(
    model: &mut GeneratorModel<S>,
    all: &[Example],
    longer_half: &[Example],
    dev: &[Example],
    phase1: &TrainConfig,
    phase2: &TrainConfig,
    on_log: &mut dyn FnMut(Phase, &LogRecord),
) -> Result<(TrainOutcome<S>, TrainOutcome<S>)> {
    let first = train(model, all, dev, phase1, None, &mut |r| on_log(Phase::Pretrain, r))?;
    if first.stop != Stop::Completed && first.stop != Stop::MaxSteps {
        let empty = TrainOutcome {
            state: TrainState::new(model, phase2.adam.clone()),
            log: Vec::new(),
            stop: first.stop.clone(),
        };
        return Ok((first, empty));
    }
    let mut start = TrainState::new(model, phase2.adam.clone());
    start.best_dev = first.state.best_dev;
    start.best_step = first.state.best_step;
    start.best = first.state.best.clone();
    let second = train(model, longer_half, dev, phase2, Some(start), &mut |r| {
        on_log(Phase::PretrainLongerHalf, r)
    })?;
    Ok((first, second))
}

/// Fraction of pairs whose positive-class probability is on the right side
/// of one half.
pub fn selector_accuracy<S: Scalar>(model: &SelectorModel<S>, pairs: &[SelectorPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(ModelError::Config("accuracy over an empty set".into()));
    }
    let mut right = 0;
    for p in pairs {
        let s = model.score(&p.history, &p.response)?;
        if (s > 0.5) == p.consistent {
            right += 1;
        }
    }
    Ok(right as f64 / pairs.len() as f64)
}
