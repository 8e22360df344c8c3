//! Backoff estimation and bisection tuning of the tightening scale.
//!
//! The loop: train once without backoffs, estimate base backoffs from the
//! per-constraint sample quantiles of that policy, then bisect a scalar
//! tightening scale - retraining warm-started each iteration - until the
//! confidence lower bound of the joint satisfaction probability meets its
//! target. Evaluation always uses fresh i.i.d. rollouts, never the training
//! batches, to keep the confidence bound's premise honest.

use serde::Serialize;
use thiserror::Error;

use crate::policy::PolicyParameters;
use crate::reinforce::{train_fixed_backoffs, ReinforceError, TrainingConfig, TrainingHistory};
use crate::rollout::{
    joint_indicator, objective, sample_batch, BackoffMatrix, Environment, RolloutError,
};
use crate::seeding::{self, domain};
use crate::stats::{
    ecdf_joint_satisfaction, empirical_quantile, f_lower_bound, SampleSet, SatisfactionEstimate,
    StatsError,
};

#[derive(Debug, Error)]
pub enum TunerError {
    #[error("tuner config invalid: {0}")]
    InvalidConfig(String),
    #[error("target unreachable at maximum tightening (scale {max_scale}, lower bound {best_f_lb} < target {target})")]
    TargetUnreachable {
        max_scale: f64,
        best_f_lb: f64,
        target: f64,
    },
    #[error(transparent)]
    Reinforce(#[from] ReinforceError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Algorithm inputs: target satisfaction, confidence, quantile parameter,
/// evaluation sample size, iteration and bracket controls.
#[derive(Debug, Clone)]
pub struct TunerConfig {
    /// Joint constraint must hold with probability at least 1 - alpha.
    pub alpha: f64,
    /// Confidence of the lower bound is 1 - epsilon.
    pub epsilon: f64,
    /// Per-constraint quantile parameter for the base backoffs.
    pub delta: f64,
    /// Monte Carlo sample count for base backoffs and evaluations.
    pub samples: usize,
    /// Bisection iteration budget M (the loop runs m = 0..=M).
    pub max_iterations: usize,
    /// Initial upper bracket end for the tightening scale.
    pub bracket_high: f64,
    /// Exit tolerance on |F_lb - (1 - alpha)|.
    pub tolerance: f64,
    /// Additional exit once the bracket is narrower than this.
    pub width_tolerance: f64,
    pub seed: u64,
}

impl TunerConfig {
    fn validate(&self) -> Result<(), TunerError> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("epsilon", self.epsilon),
            ("delta", self.delta),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(TunerError::InvalidConfig(format!(
                    "{name} must lie in (0, 1), got {v}"
                )));
            }
        }
        if self.samples == 0 {
            return Err(TunerError::InvalidConfig("samples must be >= 1".into()));
        }
        if !(self.bracket_high > 0.0) {
            return Err(TunerError::InvalidConfig(
                "bracket_high must be positive".into(),
            ));
        }
        if !(self.tolerance > 0.0) {
            return Err(TunerError::InvalidConfig(
                "tolerance must be positive".into(),
            ));
        }
        if !(self.width_tolerance >= 0.0) {
            return Err(TunerError::InvalidConfig(
                "width_tolerance must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Base backoffs plus a reliability note on the quantile estimate.
#[derive(Debug, Clone)]
pub struct InitialBackoffs {
    /// b0, shape constraints x horizon.
    pub base: Vec<Vec<f64>>,
    /// Set when the sample count is too small for a stable quantile.
    pub quantile_unreliable: bool,
}

/// Quantile-minus-mean base backoff for every (constraint, timestep) sample
/// population. Negative entries are legal and kept: the measured lower
/// bound, not the sign of the backoff, carries the guarantee.
pub fn base_backoffs_from_samples(
    samples: &[Vec<SampleSet>],
    delta: f64,
) -> Result<Vec<Vec<f64>>, StatsError> {
    samples
        .iter()
        .map(|row| {
            row.iter()
                .map(|set| Ok(empirical_quantile(set, 1.0 - delta)? - set.mean()))
                .collect()
        })
        .collect()
}

/// Rolls `samples` episodes under the given policy and estimates b0.
pub fn initial_backoffs<E: Environment>(
    env: &E,
    params: &PolicyParameters,
    delta: f64,
    samples: usize,
    seed: u64,
) -> Result<InitialBackoffs, TunerError> {
    let batch = sample_batch(env, params, samples, seed, 0)?;
    let n_g = env.constraint_count();
    let horizon = env.horizon();
    let mut per_jt: Vec<Vec<Vec<f64>>> = vec![vec![Vec::with_capacity(samples); horizon]; n_g];
    for traj in &batch.trajectories {
        for (t_idx, row) in traj.constraints.iter().enumerate() {
            for (j, &g) in row.iter().enumerate() {
                per_jt[j][t_idx].push(g);
            }
        }
    }
    let sets: Vec<Vec<SampleSet>> = per_jt
        .into_iter()
        .map(|row| row.into_iter().map(SampleSet::new).collect::<Result<_, _>>())
        .collect::<Result<_, _>>()
        .map_err(TunerError::from)?;
    Ok(InitialBackoffs {
        base: base_backoffs_from_samples(&sets, delta)?,
        quantile_unreliable: samples < 20,
    })
}

/// Percentile band of one quantity across the evaluation rollouts.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Band {
    pub p02: f64,
    pub p50: f64,
    pub p98: f64,
    pub mean: f64,
}

/// Out-of-sample evaluation of a policy: satisfaction estimate with its
/// confidence lower bound, objective statistics, and per-timestep bands of
/// every constraint and control.
#[derive(Debug, Clone)]
pub struct EvaluationReport {
    pub estimate: SatisfactionEstimate,
    pub mean_objective: f64,
    pub mean_terminal: f64,
    pub std_terminal: f64,
    /// `constraint_bands[j][t - 1]` for constraint j at timestep t.
    pub constraint_bands: Vec<Vec<Band>>,
    /// `control_bands[i][t]` for control i applied at timestep t.
    pub control_bands: Vec<Vec<Band>>,
}

fn band_of(values: Vec<f64>) -> Result<Band, StatsError> {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let set = SampleSet::new(values)?;
    Ok(Band {
        p02: empirical_quantile(&set, 0.02)?,
        p50: empirical_quantile(&set, 0.50)?,
        p98: empirical_quantile(&set, 0.98)?,
        mean,
    })
}

/// Runs `samples` fresh i.i.d. rollouts and summarizes them.
pub fn evaluate_policy<E: Environment>(
    env: &E,
    params: &PolicyParameters,
    samples: usize,
    epsilon: f64,
    discount: f64,
    seed: u64,
) -> Result<EvaluationReport, TunerError> {
    let batch = sample_batch(env, params, samples, seed, 0)?;
    let trajectories = batch.trajectories;
    let flags: Vec<bool> = trajectories.iter().map(joint_indicator).collect();
    let f_hat = ecdf_joint_satisfaction(&flags)?;
    let estimate = SatisfactionEstimate {
        f_hat,
        sample_count: samples,
        f_lb: f_lower_bound(f_hat, samples, epsilon)?,
        epsilon,
    };

    let n = trajectories.len() as f64;
    let mean_objective = trajectories
        .iter()
        .map(|t| objective(t, discount))
        .sum::<f64>()
        / n;
    let terminals: Vec<f64> = trajectories
        .iter()
        .map(|t| *t.rewards.last().expect("non-empty rewards"))
        .collect();
    let mean_terminal = terminals.iter().sum::<f64>() / n;
    let std_terminal = (terminals
        .iter()
        .map(|v| (v - mean_terminal) * (v - mean_terminal))
        .sum::<f64>()
        / n)
        .sqrt();

    let horizon = env.horizon();
    let n_g = env.constraint_count();
    let n_u = env.control_dim();
    let mut constraint_bands = Vec::with_capacity(n_g);
    for j in 0..n_g {
        let mut bands = Vec::with_capacity(horizon);
        for t in 0..horizon {
            bands.push(band_of(
                trajectories.iter().map(|tr| tr.constraints[t][j]).collect(),
            )?);
        }
        constraint_bands.push(bands);
    }
    let mut control_bands = Vec::with_capacity(n_u);
    for i in 0..n_u {
        let mut bands = Vec::with_capacity(horizon);
        for t in 0..horizon {
            bands.push(band_of(
                trajectories.iter().map(|tr| tr.controls[t][i]).collect(),
            )?);
        }
        control_bands.push(bands);
    }

    Ok(EvaluationReport {
        estimate,
        mean_objective,
        mean_terminal,
        std_terminal,
        constraint_bands,
        control_bands,
    })
}

/// One bisection update: the error `e` was measured at the midpoint of
/// `bracket`; a negative error (bound too low) moves the lower end up,
/// otherwise the upper end comes down. Returns the new bracket and the next
/// midpoint.
pub fn bisection_iterate(bracket: (f64, f64), e: f64) -> ((f64, f64), f64) {
    let (a, c) = bracket;
    let gamma = 0.5 * (a + c);
    let next = if e < 0.0 { (gamma, c) } else { (a, gamma) };
    (next, 0.5 * (next.0 + next.1))
}

/// One row of the tuner trace (the bracket is the one the scale was drawn
/// from, so widths halve every iteration).
#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub gamma: f64,
    pub f_hat: f64,
    pub f_lb: f64,
    pub e: f64,
    pub bracket_low: f64,
    pub bracket_high: f64,
    pub mean_objective: f64,
}

/// How the tuner exited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneOutcome {
    /// |e| fell within the tolerance.
    Converged,
    /// Budget or bracket-width exit; the returned iterate is the feasible
    /// one closest to the target from above.
    FeasibleSide,
}

/// Final tuner artifacts.
#[derive(Debug, Clone)]
pub struct TuneResult {
    pub params: PolicyParameters,
    pub backoffs: BackoffMatrix,
    pub tighten_scale: f64,
    pub outcome: TuneOutcome,
    pub trace: Vec<TraceRow>,
    pub step1_history: TrainingHistory,
    /// Evaluation report of the returned iterate.
    pub evaluation: EvaluationReport,
    /// Per-iteration training histories, aligned with the trace.
    pub iteration_histories: Vec<TrainingHistory>,
    /// Per-iteration applied backoff matrices, aligned with the trace.
    pub iteration_backoffs: Vec<BackoffMatrix>,
    /// Set when the base-backoff sample count was too small for a stable
    /// quantile ("quantile unreliable"); the backoffs are still computed.
    pub quantile_unreliable: bool,
}

struct Iterate {
    gamma: f64,
    e: f64,
    params: PolicyParameters,
    report: EvaluationReport,
}

struct TuneLoop<'a, E: Environment> {
    env: &'a E,
    cfg: &'a TunerConfig,
    inner: &'a TrainingConfig,
    base: Vec<Vec<f64>>,
    target: f64,
    trace: Vec<TraceRow>,
    iterates: Vec<Iterate>,
    histories: Vec<TrainingHistory>,
    applied: Vec<BackoffMatrix>,
}

impl<'a, E: Environment> TuneLoop<'a, E> {
    /// Train warm-started at one tightening scale and evaluate out of
    /// sample; records a trace row and the iterate.
    fn run_iteration(
        &mut self,
        params: PolicyParameters,
        gamma: f64,
        bracket: (f64, f64),
        index: usize,
    ) -> Result<(PolicyParameters, f64), TunerError> {
        let backoffs = BackoffMatrix::from_base(self.base.clone(), gamma);
        let train_cfg = TrainingConfig {
            seed: seeding::derive_seed(self.cfg.seed, domain::TRAIN, 1 + index as u64),
            ..self.inner.clone()
        };
        let result = train_fixed_backoffs(self.env, params, &backoffs, &train_cfg)?;
        let trained = result.params;
        let report = evaluate_policy(
            self.env,
            &trained,
            self.cfg.samples,
            self.cfg.epsilon,
            self.inner.discount,
            seeding::derive_seed(self.cfg.seed, domain::EVALUATE, 1 + index as u64),
        )?;
        let e = report.estimate.f_lb - self.target;
        self.trace.push(TraceRow {
            iteration: index,
            gamma,
            f_hat: report.estimate.f_hat,
            f_lb: report.estimate.f_lb,
            e,
            bracket_low: bracket.0,
            bracket_high: bracket.1,
            mean_objective: report.mean_objective,
        });
        self.iterates.push(Iterate {
            gamma,
            e,
            params: trained.clone(),
            report,
        });
        self.histories.push(result.history);
        self.applied.push(backoffs);
        Ok((trained, e))
    }
}

/// Backoff-based policy optimization, end to end.
///
/// `step1` (when present) trains the unconstrained policy first; pass `None`
/// to start from an already-trained checkpoint. `inner` is the per-iteration
/// retraining configuration; its tolerance is the tuner tolerance by
/// construction of the caller.
pub fn tune<E: Environment>(
    env: &E,
    initial_params: PolicyParameters,
    cfg: &TunerConfig,
    inner: &TrainingConfig,
    step1: Option<&TrainingConfig>,
) -> Result<TuneResult, TunerError> {
    cfg.validate()?;
    let n_g = env.constraint_count();
    let horizon = env.horizon();
    let target = 1.0 - cfg.alpha;

    // Step 1: unconstrained training (b = 0). The best-seen parameters are
    // the step-1 policy: the objective is stochastic and the final epoch of
    // a boundary-pressing run is not necessarily its best.
    let mut params = initial_params;
    let mut step1_history = TrainingHistory::new();
    if let Some(step1_cfg) = step1 {
        let result =
            train_fixed_backoffs(env, params, &BackoffMatrix::zeros(n_g, horizon), step1_cfg)?;
        step1_history = result.history;
        params = result.best_params;
    }

    // Step 2: base backoffs from the unconstrained policy.
    let initial = initial_backoffs(
        env,
        &params,
        cfg.delta,
        cfg.samples,
        seeding::derive_seed(cfg.seed, domain::BACKOFF_BASE, 0),
    )?;
    let quantile_unreliable = initial.quantile_unreliable;
    let base = initial.base;

    let mut state = TuneLoop {
        env,
        cfg,
        inner,
        base,
        target,
        trace: Vec::new(),
        iterates: Vec::new(),
        histories: Vec::new(),
        applied: Vec::new(),
    };

    // Step 3: bisection on the tightening scale.
    let mut bracket = (0.0, cfg.bracket_high);
    let mut converged: Option<usize> = None;
    let mut index = 0usize;
    for _m in 0..=cfg.max_iterations {
        let gamma = 0.5 * (bracket.0 + bracket.1);
        let (trained, e) = state.run_iteration(params, gamma, bracket, index)?;
        params = trained;
        index += 1;
        if e.abs() <= cfg.tolerance {
            converged = Some(state.iterates.len() - 1);
            break;
        }
        let (next_bracket, _) = bisection_iterate(bracket, e);
        bracket = next_bracket;
        if bracket.1 - bracket.0 < cfg.width_tolerance {
            break;
        }
    }

    // If nothing certified, push the scale to the bracket top and expand it
    // (doubling at most three times) before giving up.
    if converged.is_none() && !state.iterates.iter().any(|it| it.e >= 0.0) {
        let mut c = cfg.bracket_high;
        for doubling in 0..=3 {
            let gamma = c;
            let (trained, e) = state.run_iteration(params, gamma, (bracket.0, c), index)?;
            params = trained;
            index += 1;
            if e >= 0.0 {
                break;
            }
            if doubling == 3 {
                let best_f_lb = state
                    .iterates
                    .iter()
                    .map(|it| it.report.estimate.f_lb)
                    .fold(f64::NEG_INFINITY, f64::max);
                return Err(TunerError::TargetUnreachable {
                    max_scale: c,
                    best_f_lb,
                    target,
                });
            }
            c *= 2.0;
        }
    }

    // Selection: the converged iterate, else the feasible iterate with the
    // smallest error. The discrete satisfaction frequency ties every
    // fully-satisfying iterate at the same error (at S = 500 and a 0.99
    // target only a perfect evaluation certifies at all), so ties break by
    // the measured mean objective: among equally certified policies the
    // algorithm's own goal is the best-performing one.
    let chosen = match converged {
        Some(i) => i,
        None => {
            let mut best: Option<usize> = None;
            for (i, it) in state.iterates.iter().enumerate() {
                if it.e < 0.0 {
                    continue;
                }
                best = match best {
                    None => Some(i),
                    Some(b) => {
                        let cur = &state.iterates[b];
                        if it.e < cur.e - 1e-15
                            || ((it.e - cur.e).abs() <= 1e-15
                                && it.report.mean_objective > cur.report.mean_objective)
                        {
                            Some(i)
                        } else {
                            Some(b)
                        }
                    }
                };
            }
            best.expect("expansion either found a feasible iterate or errored")
        }
    };

    let outcome = if converged.is_some() {
        TuneOutcome::Converged
    } else {
        TuneOutcome::FeasibleSide
    };
    let it = &state.iterates[chosen];
    Ok(TuneResult {
        params: it.params.clone(),
        backoffs: BackoffMatrix::from_base(state.base.clone(), it.gamma),
        tighten_scale: it.gamma,
        outcome,
        trace: state.trace,
        step1_history,
        evaluation: it.report.clone(),
        iteration_histories: state.histories,
        iteration_backoffs: state.applied,
        quantile_unreliable,
    })
}
