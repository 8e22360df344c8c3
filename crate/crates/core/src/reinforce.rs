//! Policy-gradient training with a mean baseline and adaptive-moment ascent.
//!
//! One epoch collects a batch of episodes under the current policy, centers
//! their penalized returns by the batch mean, weights the summed
//! log-density gradients of each episode by its centered return, and ascends.
//! Training exits when two successive history entries are closer than the
//! tolerance or the epoch budget runs out.

use rayon::prelude::*;
use thiserror::Error;

use crate::policy::{self, PolicyError, PolicyParameters, PolicyWindow};
use crate::rollout::{
    joint_indicator, objective, penalized_return, sample_batch, BackoffMatrix, Environment,
    RolloutError, Trajectory,
};
use crate::seeding::{self, domain};

#[derive(Debug, Error)]
pub enum ReinforceError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("need at least two episodes per epoch (the mean baseline makes a single-episode gradient identically zero), got {0}")]
    TooFewEpisodes(usize),
    #[error("epoch budget must be at least 1")]
    NoEpochs,
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("non-finite gradient at epoch {epoch} (norm {norm})")]
    NonFiniteGradient { epoch: usize, norm: f64 },
    #[error("pretraining dataset is empty")]
    EmptyDataset,
    #[error("pretraining row {row}: {source}")]
    BadPretrainRow {
        row: usize,
        source: PolicyError,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
}

/// Hyperparameters of one training phase.
#[derive(Debug, Clone)]
pub struct TrainingConfig {
    /// Episodes per epoch (K).
    pub episodes: usize,
    /// Epoch budget (N).
    pub epochs: usize,
    /// Adam step size.
    pub learning_rate: f64,
    /// Multiplicative step-size decay per epoch; 1.0 keeps it constant.
    pub lr_decay: f64,
    /// Quadratic penalty weight on tightened-constraint violations.
    pub penalty_weight: f64,
    /// Reward discount factor.
    pub discount: f64,
    /// Exit threshold on successive history entries.
    pub tol: f64,
    /// Moving-average window applied to the history before the exit test;
    /// 1 compares raw entries.
    pub history_window: usize,
    /// Global-norm cap on the gradient estimate before the optimizer sees
    /// it. Penalty cliffs near the constraint boundary otherwise produce
    /// occasional enormous batches that poison the moment accumulators.
    pub grad_clip: f64,
    pub seed: u64,
}

impl TrainingConfig {
    fn validate(&self) -> Result<(), ReinforceError> {
        if self.episodes < 2 {
            return Err(ReinforceError::TooFewEpisodes(self.episodes));
        }
        if self.epochs == 0 {
            return Err(ReinforceError::NoEpochs);
        }
        if !(self.tol > 0.0) {
            return Err(ReinforceError::InvalidTolerance(self.tol));
        }
        Ok(())
    }
}

/// Bias-corrected adaptive-moment accumulator (ascent convention).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(param_count: usize, step_size: f64) -> Self {
        Self {
            step_size,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One ascent update along the gradient; parameters move toward larger
/// penalized return.
pub fn optimizer_step(
    state: &mut OptimizerState,
    params: &mut PolicyParameters,
    gradient: &[f64],
) -> Result<(), ReinforceError> {
    let mut flat = params.flatten();
    if gradient.len() != flat.len() {
        return Err(ReinforceError::Policy(PolicyError::DimensionMismatch(
            format!(
                "gradient has {} entries, policy has {}",
                gradient.len(),
                flat.len()
            ),
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..flat.len() {
        let g = gradient[i];
        state.first_moment[i] = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * g;
        state.second_moment[i] =
            state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.first_moment[i] / bc1;
        let v_hat = state.second_moment[i] / bc2;
        flat[i] += state.step_size * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    params.assign_flat(&flat)?;
    Ok(())
}

/// Batch-mean baseline.
pub fn baseline(returns: &[f64]) -> Result<f64, ReinforceError> {
    if returns.is_empty() {
        return Err(ReinforceError::EmptyBatch);
    }
    Ok(returns.iter().sum::<f64>() / returns.len() as f64)
}

/// Penalized return of every episode in a batch.
pub fn penalized_returns(
    batch: &[Trajectory],
    backoffs: &BackoffMatrix,
    penalty_weight: f64,
    discount: f64,
) -> Vec<f64> {
    batch
        .iter()
        .map(|t| penalized_return(t, backoffs, penalty_weight, discount))
        .collect()
}

/// Score-function gradient from precomputed returns: the mean over episodes
/// of `(return - baseline) * sum_t grad log pi(u_t | window_t)`.
///
/// Episode gradients are computed in parallel but reduced in episode order,
/// so the result is bitwise independent of thread scheduling.
pub fn gradient_from_returns(
    batch: &[Trajectory],
    returns: &[f64],
    params: &PolicyParameters,
) -> Result<Vec<f64>, ReinforceError> {
    if batch.len() < 2 {
        return Err(ReinforceError::TooFewEpisodes(batch.len()));
    }
    if batch.len() != returns.len() {
        return Err(ReinforceError::Policy(PolicyError::DimensionMismatch(
            format!("{} trajectories but {} returns", batch.len(), returns.len()),
        )));
    }
    let center = baseline(returns)?;

    let per_episode: Vec<Result<Vec<f64>, ReinforceError>> = batch
        .par_iter()
        .map(|traj| {
            let mut acc = vec![0.0; params.param_count()];
            for t in 0..traj.horizon() {
                let window =
                    PolicyWindow::from_history(&traj.states, &traj.controls, t, params);
                let g = policy::grad_log_prob(params, &window, &traj.raw_controls[t])?;
                for (a, gi) in acc.iter_mut().zip(&g) {
                    *a += gi;
                }
            }
            Ok(acc)
        })
        .collect();

    let mut total = vec![0.0; params.param_count()];
    for (k, grads) in per_episode.into_iter().enumerate() {
        let grads = grads?;
        let weight = returns[k] - center;
        for (t, g) in total.iter_mut().zip(&grads) {
            *t += weight * g;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    total.iter_mut().for_each(|g| *g *= scale);
    Ok(total)
}

/// Convenience wrapper computing the penalized returns internally.
pub fn gradient_estimate(
    batch: &[Trajectory],
    backoffs: &BackoffMatrix,
    penalty_weight: f64,
    discount: f64,
    params: &PolicyParameters,
) -> Result<Vec<f64>, ReinforceError> {
    let returns = penalized_returns(batch, backoffs, penalty_weight, discount);
    gradient_from_returns(batch, &returns, params)
}

/// Per-epoch training statistics.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    /// Batch mean of the penalized return (the history entry).
    pub mean_penalized: f64,
    /// Batch mean of the raw discounted objective.
    pub mean_objective: f64,
    /// Fraction of episodes violating some raw constraint.
    pub violation_rate: f64,
    pub grad_norm: f64,
}

pub type TrainingHistory = Vec<EpochStats>;

/// Outcome of one training phase: final parameters for warm starts, the
/// best-seen parameters by batch mean (the objective is stochastic, so the
/// last epoch is not necessarily the best), and the history.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: PolicyParameters,
    pub best_params: PolicyParameters,
    pub best_epoch: usize,
    pub history: TrainingHistory,
    pub discarded_episodes: usize,
}

fn smoothed(history: &[EpochStats], window: usize) -> Option<f64> {
    let w = window.max(1);
    if history.len() < w {
        return None;
    }
    let tail = &history[history.len() - w..];
    Some(tail.iter().map(|e| e.mean_penalized).sum::<f64>() / w as f64)
}

/// Policy-gradient loop at fixed backoffs.
pub fn train_fixed_backoffs<E: Environment>(
    env: &E,
    params: PolicyParameters,
    backoffs: &BackoffMatrix,
    config: &TrainingConfig,
) -> Result<TrainResult, ReinforceError> {
    train_fixed_backoffs_observed(env, params, backoffs, config, &mut |_, _| {})
}

/// Same loop with an observer called after every epoch (periodic
/// checkpointing, progress reporting).
pub fn train_fixed_backoffs_observed<E: Environment>(
    env: &E,
    params: PolicyParameters,
    backoffs: &BackoffMatrix,
    config: &TrainingConfig,
    on_epoch: &mut dyn FnMut(&EpochStats, &PolicyParameters),
) -> Result<TrainResult, ReinforceError> {
    config.validate()?;
    let mut params = params;
    let mut optimizer = OptimizerState::new(params.param_count(), config.learning_rate);
    let mut history: TrainingHistory = Vec::new();
    let mut discarded = 0;
    let mut best: Option<(f64, usize, PolicyParameters)> = None;
    let mut prev_smoothed: Option<f64> = None;

    for epoch in 1..=config.epochs {
        let seed = seeding::derive_seed(config.seed, domain::TRAIN, epoch as u64);
        let batch = sample_batch(env, &params, config.episodes, seed, epoch as u64)?;
        discarded += batch.discarded;
        let trajectories = batch.trajectories;

        let returns = penalized_returns(
            &trajectories,
            backoffs,
            config.penalty_weight,
            config.discount,
        );
        let mean_penalized = baseline(&returns)?;
        let mean_objective = trajectories
            .iter()
            .map(|t| objective(t, config.discount))
            .sum::<f64>()
            / trajectories.len() as f64;
        let violation_rate = trajectories
            .iter()
            .filter(|t| !joint_indicator(t))
            .count() as f64
            / trajectories.len() as f64;

        let mut gradient = gradient_from_returns(&trajectories, &returns, &params)?;
        let grad_norm = gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(ReinforceError::NonFiniteGradient {
                epoch,
                norm: grad_norm,
            });
        }
        if config.grad_clip.is_finite() && grad_norm > config.grad_clip {
            let scale = config.grad_clip / grad_norm;
            gradient.iter_mut().for_each(|g| *g *= scale);
        }

        if best.as_ref().map_or(true, |(b, _, _)| mean_penalized > *b) {
            best = Some((mean_penalized, epoch, params.clone()));
        }

        optimizer.step_size = config.learning_rate * config.lr_decay.powi(epoch as i32 - 1);
        optimizer_step(&mut optimizer, &mut params, &gradient)?;

        history.push(EpochStats {
            epoch,
            mean_penalized,
            mean_objective,
            violation_rate,
            grad_norm,
        });
        on_epoch(history.last().expect("just pushed"), &params);

        let current = smoothed(&history, config.history_window);
        if let (Some(prev), Some(now)) = (prev_smoothed, current) {
            if (now - prev).abs() <= config.tol {
                break;
            }
        }
        prev_smoothed = current;
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(TrainResult {
        params,
        best_params,
        best_epoch,
        history,
        discarded_episodes: discarded,
    })
}

/// Supervised hot-start: fit the policy mean to reference controls by
/// full-batch gradient descent on squared error, leaving the std head
/// untouched. Dataset rows pair a raw-unit window with a target control.
/// Returns the fitted parameters and the recorded loss curve (one entry per
/// epoch plus the final loss).
pub fn pretrain_supervised(
    params: &PolicyParameters,
    dataset: &[(Vec<f64>, Vec<f64>)],
    epochs: usize,
    step: f64,
) -> Result<(PolicyParameters, Vec<f64>), ReinforceError> {
    if dataset.is_empty() {
        return Err(ReinforceError::EmptyDataset);
    }
    let windows: Vec<PolicyWindow> = dataset
        .iter()
        .enumerate()
        .map(|(row, (raw, _))| {
            PolicyWindow::from_raw(raw, params)
                .map_err(|source| ReinforceError::BadPretrainRow { row, source })
        })
        .collect::<Result<_, _>>()?;

    let mut fitted = params.clone();
    let mut losses = Vec::with_capacity(epochs + 1);
    let n = dataset.len() as f64;
    for _ in 0..epochs {
        let mut loss_sum = 0.0;
        let mut grad = vec![0.0; fitted.param_count()];
        for (row, ((_, target), window)) in dataset.iter().zip(&windows).enumerate() {
            let (loss, g) = policy::mean_mse_grad(&fitted, window, target)
                .map_err(|source| ReinforceError::BadPretrainRow { row, source })?;
            loss_sum += loss / n;
            for (a, gi) in grad.iter_mut().zip(&g) {
                *a += gi / n;
            }
        }
        losses.push(loss_sum);
        let mut flat = fitted.flatten();
        for (p, g) in flat.iter_mut().zip(&grad) {
            *p -= step * g;
        }
        fitted.assign_flat(&flat)?;
    }
    // Final loss after the last update.
    let final_loss = dataset
        .iter()
        .zip(&windows)
        .map(|((_, target), window)| policy::mean_mse_grad(&fitted, window, target))
        .try_fold(0.0, |acc, r| r.map(|(l, _)| acc + l / n))?;
    losses.push(final_loss);
    Ok((fitted, losses))
}
