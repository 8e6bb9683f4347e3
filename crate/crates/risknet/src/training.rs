//! Surrogate training: Adam optimizer, learning-rate schedule, shuffled
//! block-diagonal batches, per-epoch metrics, best-validation checkpointing,
//! and early stopping.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{self, Example, Hyper, Mode, ModelParams};
use crate::rng::stream_rng;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimization knobs. The learning rate holds at `lr0` for `warm_epochs`
/// epochs and then decays by `decay` per epoch.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub hyper: Hyper,
    /// Examples (topologies) per optimizer step.
    pub batch_size: usize,
    pub lr0: f64,
    pub warm_epochs: usize,
    pub decay: f64,
    pub max_epochs: usize,
    /// Stop after this many epochs without a new best validation loss.
    pub patience: usize,
    /// Seeds parameter init (stream 0), epoch shuffling (stream 1), and
    /// dropout (stream 2).
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hyper: Hyper::default(),
            batch_size: 64,
            lr0: 1e-4,
            warm_epochs: 20,
            decay: 0.99,
            max_epochs: 80,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be at least 1"));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::param("lr0 must be positive"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::param("decay must be in (0, 1]"));
        }
        if self.max_epochs == 0 {
            return Err(Error::param("max_epochs must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::param("patience must be at least 1"));
        }
        Ok(())
    }
}

/// Learning rate of one epoch: `lr0` during warmup, then
/// `lr0 · decay^(epoch − warm_epochs + 1)`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    if epoch < config.warm_epochs {
        config.lr0
    } else {
        config.lr0 * config.decay.powi((epoch - config.warm_epochs + 1) as i32)
    }
}

/// Adam moment estimates over the flattened parameter vector.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(n_params: usize) -> Self {
        OptimizerState { m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update in place:
/// θ ← θ − lr·m̂/(√v̂ + ε) with β₁ = 0.9, β₂ = 0.999, ε = 10⁻⁸.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    let g = grads.flatten();
    let mut theta = params.flatten();
    if g.len() != state.m.len() || theta.len() != g.len() {
        return Err(Error::param(format!(
            "optimizer state covers {} parameters, model has {}",
            state.m.len(),
            theta.len()
        )));
    }
    state.step += 1;
    let correction1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let correction2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for i in 0..theta.len() {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let m_hat = state.m[i] / correction1;
        let v_hat = state.v[i] / correction2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    params.assign_flat(&theta)
}

/// Example references grouped by split. Feature and label normalization is
/// assumed to have been applied already (the dataset loader does it).
pub struct TrainData<'a> {
    pub train: Vec<&'a Example>,
    pub test: Vec<&'a Example>,
    pub validation: Vec<&'a Example>,
}

impl<'a> TrainData<'a> {
    pub fn from_dataset(dataset: &'a Dataset) -> TrainData<'a> {
        let collect = |split: Split| {
            dataset.split_indices(split).into_iter().map(|i| &dataset.examples[i]).collect()
        };
        TrainData {
            train: collect(Split::Train),
            test: collect(Split::Test),
            validation: collect(Split::Validation),
        }
    }
}

/// One row of the metrics log. `train_loss` is the running mean of the
/// optimization objective (weight penalty included, dropout active);
/// `test_loss` and `val_loss` are pooled per-SLA mean NLLs in
/// deterministic-inference mode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

/// Renders the metrics log as CSV with header
/// `epoch,lr,train_loss,test_loss,val_loss,seconds`.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,lr,train_loss,test_loss,val_loss,seconds\n");
    for row in history {
        writeln!(
            out,
            "{},{},{},{},{},{:.3}",
            row.epoch, row.lr, row.train_loss, row.test_loss, row.val_loss, row.seconds
        )
        .expect("writing to a String cannot fail");
    }
    out
}

/// Everything [`train`] produces: the best-validation parameters (the
/// checkpoint), the final parameters, and the per-epoch history.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub best_params: ModelParams,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub final_params: ModelParams,
    pub history: Vec<EpochMetrics>,
    pub stopped_early: bool,
}

/// Runs the optimization loop.
///
/// Each epoch shuffles the train examples, forms batches as block-diagonal
/// disjoint unions (one forward/backward serves a whole batch), applies
/// Adam with the scheduled learning rate, and evaluates test/validation
/// NLL. The parameters with the best validation loss are retained; training
/// stops early when validation fails to improve for `patience` epochs. The
/// whole run is a deterministic function of the config and data.
pub fn train(config: &TrainConfig, data: &TrainData) -> Result<TrainReport> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::data("training requires a non-empty train split"));
    }
    if data.validation.is_empty() {
        return Err(Error::data("training requires a non-empty validation split"));
    }

    let mut params = ModelParams::init(&config.hyper, config.seed)?;
    let mut opt = OptimizerState::new(params.n_params());
    let mut shuffle_rng = stream_rng(config.seed, 1);
    let mut dropout_rng = stream_rng(config.seed, 2);

    let mut report = TrainReport {
        best_params: params.clone(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        final_params: params.clone(),
        history: Vec::new(),
        stopped_early: false,
    };
    let mut epochs_since_best = 0usize;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 0..config.max_epochs {
        let started = Instant::now();
        let lr = lr_schedule(epoch, config);
        order.shuffle(&mut shuffle_rng);

        let mut objective_sum = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| data.train[i]).collect();
            let (merged, weights) = model::merge_examples(&batch)?;
            let (value, grads) = model::weighted_loss_and_gradients(
                &params,
                &config.hyper,
                &merged,
                &weights,
                Mode::Train(&mut dropout_rng),
            )
            .map_err(|e| {
                Error::numerical(format!(
                    "{e}; epoch {epoch}, step {step}, lr {lr:e}, \
                     batch of train examples {chunk:?}"
                ))
            })?;
            objective_sum += value;
            batches += 1;
            adam_step(&mut params, &grads, &mut opt, lr)?;
        }

        let train_loss = objective_sum / batches as f64;
        let test_loss = if data.test.is_empty() {
            f64::NAN
        } else {
            model::mean_nll(&params, &config.hyper, &data.test)?
        };
        let val_loss = model::mean_nll(&params, &config.hyper, &data.validation)?;
        report.history.push(EpochMetrics {
            epoch,
            lr,
            train_loss,
            test_loss,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        });

        if val_loss < report.best_val_loss {
            report.best_val_loss = val_loss;
            report.best_epoch = epoch;
            report.best_params = params.clone();
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= config.patience {
                report.stopped_early = true;
                break;
            }
        }
    }

    report.final_params = params;
    Ok(report)
}

/// Convenience wrapper: split a loaded dataset and train on it.
pub fn train_on_dataset(config: &TrainConfig, dataset: &Dataset) -> Result<TrainReport> {
    train(config, &TrainData::from_dataset(dataset))
}
