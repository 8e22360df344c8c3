//! Integration of the public surface: configuration text to trained,
//! tuned, evaluated policy on the real environment at miniature scale.

use chance_rl_core::backoff::{evaluate_policy, initial_backoffs, tune, TuneOutcome};
use chance_rl_core::config::ExperimentConfig;
use chance_rl_core::policy::{forward, PolicyWindow};
use chance_rl_core::reinforce::train_fixed_backoffs;
use chance_rl_core::rollout::{sample_batch, BackoffMatrix, Environment};
use chance_rl_core::stats::f_lower_bound;

const TINY: &str = r#"
seed = 17

[environment]
horizon = 4
interval_duration = 20.0
substeps = 5

[environment.kinetics]
u_m = 0.0572
u_d = 0.0
y_nx = 504.5
k_m = 0.00016
k_sq = 23.51
k_iq = 800.0
k_d = 0.281
k_nq = 16.89

[policy]
hidden = [8]
state_scales = [10.0, 800.0, 0.2]

[training]
learning_rate = 0.02

[training.step1]
episodes = 8
epochs = 6
tol = 1e-9

[training.inner]
episodes = 6
epochs = 3
tol = 1e-9

[tuner]
alpha = 0.1
epsilon = 0.3
delta = 0.1
samples = 40
max_iterations = 3
width_tolerance = 1e-6
"#;

#[test]
fn config_to_tuned_policy_end_to_end() {
    let config = ExperimentConfig::from_toml_str(TINY).unwrap();
    let env = config.build_env().unwrap();
    assert_eq!(env.horizon(), 4);
    assert_eq!(env.control_bounds(), vec![(120.0, 400.0), (0.0, 40.0)]);

    // Train the unconstrained policy.
    let init = config.build_policy(config.seed).unwrap();
    let step1 = train_fixed_backoffs(
        &env,
        init,
        &BackoffMatrix::zeros(2, config.horizon),
        &config.step1_training(config.seed),
    )
    .unwrap();
    assert_eq!(step1.history.len(), 6);

    // Base backoffs from its rollouts have the constraint grid's shape.
    let base = initial_backoffs(&env, &step1.params, 0.1, 40, 5).unwrap();
    assert_eq!(base.base.len(), 2);
    assert_eq!(base.base[0].len(), 4);
    assert!(base.base.iter().flatten().all(|b| b.is_finite()));

    // Tune and verify the certified bound against an independent fresh
    // evaluation.
    let result = tune(
        &env,
        step1.best_params.clone(),
        &config.tuner_config(config.seed),
        &config.inner_training(config.seed),
        None,
    )
    .unwrap();
    assert!(matches!(
        result.outcome,
        TuneOutcome::Converged | TuneOutcome::FeasibleSide
    ));
    assert_eq!(result.backoffs.constraint_count(), 2);
    assert_eq!(result.backoffs.horizon(), 4);
    assert!(!result.trace.is_empty());
    // Monotone bracket along the trace.
    for pair in result.trace.windows(2) {
        assert!(pair[1].bracket_low >= pair[0].bracket_low);
        assert!(pair[1].bracket_high <= pair[0].bracket_high);
    }

    let fresh = evaluate_policy(&env, &result.params, 40, 0.3, 1.0, 991).unwrap();
    assert!(fresh.estimate.f_lb <= fresh.estimate.f_hat);
    let recomputed =
        f_lower_bound(fresh.estimate.f_hat, 40, 0.3).unwrap();
    assert_eq!(fresh.estimate.f_lb, recomputed);

    // The tuned policy emits bounded controls everywhere it is asked.
    let batch = sample_batch(&env, &result.params, 16, 77, 0).unwrap();
    for traj in &batch.trajectories {
        for u in &traj.controls {
            assert!(u[0] >= 120.0 && u[0] <= 400.0);
            assert!(u[1] >= 0.0 && u[1] <= 40.0);
        }
        for t in 0..traj.horizon() {
            let w = PolicyWindow::from_history(&traj.states, &traj.controls, t, &result.params);
            let dist = forward(&result.params, &w).unwrap();
            assert!(dist.mean[0] >= 120.0 && dist.mean[0] <= 400.0);
            assert!(dist.std.iter().all(|&s| s > 0.0));
        }
    }
}
