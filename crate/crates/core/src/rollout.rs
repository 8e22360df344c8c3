//! Closed-loop episode generation and return computation.
//!
//! A trajectory records states, controls (raw Gaussian draws and the clamped
//! values the plant received), rewards, and the constraint grid. Constraint
//! satisfaction is always measured against the raw constraints; the training
//! penalty is the only place the tightened (backed-off) constraints enter.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsError, EnvTransition};
use crate::policy::{self, PolicyError, PolicyParameters, PolicyWindow};
use crate::seeding;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("episode {episode} failed after {attempts} attempts: {last}")]
    EpisodeDiscarded {
        episode: u64,
        attempts: usize,
        last: String,
    },
}

/// Full environment contract used by rollout and training: an uncertain
/// transition plus horizon, constraint functions, rewards, and control box.
pub trait Environment: EnvTransition + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn control_bounds(&self) -> Vec<(f64, f64)>;
    /// Number of path constraints evaluated at each step.
    fn constraint_count(&self) -> usize;
    /// Normalized constraint values; satisfaction means every entry <= 0.
    fn constraints(&self, x: &[f64]) -> Result<Vec<f64>, DynamicsError>;
    fn stage_reward(&self, t: usize, x: &[f64], u: &[f64], u_prev: &[f64]) -> f64;
    fn terminal_reward(&self, x: &[f64]) -> f64;
}

/// One episode: x_0..x_T, u_0..u_{T-1}, R_0..R_T and the constraint grid
/// over t = 1..T.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub raw_controls: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    /// `constraints[t - 1][j]` is constraint j evaluated at x_t.
    pub constraints: Vec<Vec<f64>>,
    pub draw_id: u64,
    pub seed: u64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn constraint_count(&self) -> usize {
        self.constraints.first().map_or(0, Vec::len)
    }
}

/// Per-constraint, per-timestep tightening values `b = scale * base`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackoffMatrix {
    /// Base values b0, shape n_g x T.
    pub base: Vec<Vec<f64>>,
    /// Scaled values actually applied during training.
    pub values: Vec<Vec<f64>>,
    pub tighten_scale: f64,
}

impl BackoffMatrix {
    pub fn zeros(constraint_count: usize, horizon: usize) -> Self {
        Self {
            base: vec![vec![0.0; horizon]; constraint_count],
            values: vec![vec![0.0; horizon]; constraint_count],
            tighten_scale: 0.0,
        }
    }

    pub fn from_base(base: Vec<Vec<f64>>, tighten_scale: f64) -> Self {
        let values = base
            .iter()
            .map(|row| row.iter().map(|b| tighten_scale * b).collect())
            .collect();
        Self {
            base,
            values,
            tighten_scale,
        }
    }

    /// Same base, different tightening scale.
    pub fn rescaled(&self, tighten_scale: f64) -> Self {
        Self::from_base(self.base.clone(), tighten_scale)
    }

    pub fn constraint_count(&self) -> usize {
        self.base.len()
    }

    pub fn horizon(&self) -> usize {
        self.base.first().map_or(0, Vec::len)
    }

    /// Applied backoff for constraint `j` at step `t` (1-based timestep).
    pub fn value(&self, j: usize, t: usize) -> f64 {
        self.values[j][t - 1]
    }
}

/// Rolls one closed-loop episode: build the window, sample the action, step
/// the plant, record rewards and constraints.
pub fn sample_trajectory<E: Environment>(
    env: &E,
    params: &PolicyParameters,
    horizon: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
    draw_id: u64,
    seed: u64,
) -> Result<Trajectory, RolloutError> {
    let draw = env.sample_draw(rng)?;
    let mut states = Vec::with_capacity(horizon + 1);
    states.push(env.initial_state(&draw));

    let mut raw_controls = Vec::with_capacity(horizon);
    let mut controls: Vec<Vec<f64>> = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon + 1);
    let mut constraints = Vec::with_capacity(horizon);

    for t in 0..horizon {
        let window = PolicyWindow::from_history(&states, &controls, t, params);
        let action = policy::sample_action(params, &window, rng)?;
        let u_prev = if t == 0 {
            action.actuated.clone()
        } else {
            controls[t - 1].clone()
        };
        rewards.push(env.stage_reward(t, &states[t], &action.actuated, &u_prev));
        let next = env.sample_transition(&draw, &states[t], &action.actuated, rng)?;
        constraints.push(env.constraints(&next)?);
        states.push(next);
        raw_controls.push(action.raw);
        controls.push(action.actuated);
    }
    rewards.push(env.terminal_reward(states.last().expect("non-empty")));

    Ok(Trajectory {
        states,
        raw_controls,
        controls,
        rewards,
        constraints,
        draw_id,
        seed,
    })
}

/// A batch of trajectories plus the number of discarded (failed) episodes.
#[derive(Debug)]
pub struct TrajectoryBatch {
    pub trajectories: Vec<Trajectory>,
    pub discarded: usize,
}

const MAX_ATTEMPTS: usize = 8;

/// Samples `count` episodes in parallel, one RNG stream per episode index.
/// Failed integrations are discarded and resampled on a fresh substream;
/// results are independent of thread scheduling.
pub fn sample_batch<E: Environment>(
    env: &E,
    params: &PolicyParameters,
    count: usize,
    seed: u64,
    stream_tag: u64,
) -> Result<TrajectoryBatch, RolloutError> {
    let horizon = env.horizon();
    let results: Vec<Result<(Trajectory, usize), RolloutError>> = (0..count as u64)
        .into_par_iter()
        .map(|episode| {
            let stream = stream_tag.wrapping_mul(1 << 20).wrapping_add(episode);
            let mut last: Option<RolloutError> = None;
            for attempt in 0..MAX_ATTEMPTS {
                let mut rng = seeding::episode_rng(seed, stream, attempt as u64);
                match sample_trajectory(env, params, horizon, &mut rng, stream, seed) {
                    Ok(traj) => return Ok((traj, attempt)),
                    Err(err) => last = Some(err),
                }
            }
            Err(RolloutError::EpisodeDiscarded {
                episode,
                attempts: MAX_ATTEMPTS,
                last: last.map_or_else(|| "unknown".into(), |e| e.to_string()),
            })
        })
        .collect();

    let mut trajectories = Vec::with_capacity(count);
    let mut discarded = 0;
    for r in results {
        let (traj, retries) = r?;
        discarded += retries;
        trajectories.push(traj);
    }
    Ok(TrajectoryBatch {
        trajectories,
        discarded,
    })
}

/// Discounted return J = sum_t gamma^t R_t.
pub fn objective(traj: &Trajectory, discount: f64) -> f64 {
    let mut weight = 1.0;
    let mut total = 0.0;
    for r in &traj.rewards {
        total += weight * r;
        weight *= discount;
    }
    total
}

/// Penalized return: the objective minus a quadratic hinge on the tightened
/// constraints, `J - mu * sum max(g + b, 0)^2`.
pub fn penalized_return(
    traj: &Trajectory,
    backoffs: &BackoffMatrix,
    penalty_weight: f64,
    discount: f64,
) -> f64 {
    let mut penalty = 0.0;
    for (t_idx, row) in traj.constraints.iter().enumerate() {
        for (j, &g) in row.iter().enumerate() {
            let slack = g + backoffs.value(j, t_idx + 1);
            if slack > 0.0 {
                penalty += slack * slack;
            }
        }
    }
    objective(traj, discount) - penalty_weight * penalty
}

/// True iff every raw constraint holds at every timestep (boundary included).
pub fn joint_indicator(traj: &Trajectory) -> bool {
    traj.constraints
        .iter()
        .all(|row| row.iter().all(|&g| g <= 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{BanditEnv, ConstantConstraintEnv};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_policy(env_bounds: &[(f64, f64)], n_x: usize) -> PolicyParameters {
        PolicyParameters::initialize(
            &crate::policy::PolicyArchitecture {
                hidden_widths: vec![6],
                sigma_max_frac: 0.25,
                sigma_min_frac: 0.0,
                init_sigma_frac: 0.2,
            },
            env_bounds,
            &vec![1.0; n_x],
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap()
    }

    fn constant_trajectory(rewards: Vec<f64>, constraints: Vec<Vec<f64>>) -> Trajectory {
        let horizon = constraints.len();
        Trajectory {
            states: vec![vec![0.0]; horizon + 1],
            raw_controls: vec![vec![0.0]; horizon],
            controls: vec![vec![0.0]; horizon],
            rewards,
            constraints,
            draw_id: 0,
            seed: 0,
        }
    }

    #[test]
    fn lengths_contract() {
        let env = ConstantConstraintEnv::satisfied(12);
        let params = small_policy(&env.control_bounds(), env.state_dim());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let traj = sample_trajectory(&env, &params, 12, &mut rng, 0, 3).unwrap();
        assert_eq!(traj.states.len(), 13);
        assert_eq!(traj.controls.len(), 12);
        assert_eq!(traj.raw_controls.len(), 12);
        assert_eq!(traj.rewards.len(), 13);
        assert_eq!(traj.constraints.len(), 12);
    }

    #[test]
    fn identical_streams_give_identical_trajectories() {
        let env = BanditEnv::default();
        let params = small_policy(&env.control_bounds(), env.state_dim());
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = sample_trajectory(&env, &params, 1, &mut r1, 0, 7).unwrap();
        let b = sample_trajectory(&env, &params, 1, &mut r2, 0, 7).unwrap();
        assert_eq!(a.controls, b.controls);
        assert_eq!(a.rewards, b.rewards);
    }

    #[test]
    fn batches_are_reproducible_and_order_stable() {
        let env = ConstantConstraintEnv::satisfied(4);
        let params = small_policy(&env.control_bounds(), env.state_dim());
        let a = sample_batch(&env, &params, 16, 42, 1).unwrap();
        let b = sample_batch(&env, &params, 16, 42, 1).unwrap();
        assert_eq!(a.discarded, 0);
        for (ta, tb) in a.trajectories.iter().zip(&b.trajectories) {
            assert_eq!(ta.controls, tb.controls);
            assert_eq!(ta.states, tb.states);
        }
        let c = sample_batch(&env, &params, 16, 43, 1).unwrap();
        assert_ne!(a.trajectories[0].controls, c.trajectories[0].controls);
    }

    #[test]
    fn objective_is_the_discounted_sum() {
        let traj = constant_trajectory(vec![0.0; 13], vec![vec![-1.0]; 12]);
        assert_eq!(objective(&traj, 1.0), 0.0);

        let mut rewards = vec![0.0; 13];
        rewards[12] = 0.16;
        let traj = constant_trajectory(rewards, vec![vec![-1.0]; 12]);
        assert_eq!(objective(&traj, 1.0), 0.16);

        let traj = constant_trajectory(vec![1.0, 1.0, 1.0], vec![vec![-1.0]; 2]);
        assert_eq!(objective(&traj, 0.5), 1.75);
    }

    #[test]
    fn penalty_hinges_at_zero() {
        // No violations: the penalty is inactive.
        let mut rewards = vec![0.0; 3];
        rewards[2] = 5.0;
        let traj = constant_trajectory(rewards, vec![vec![-0.2], vec![-0.4]]);
        let b = BackoffMatrix::zeros(1, 2);
        assert_eq!(penalized_return(&traj, &b, 10.0, 1.0), 5.0);

        // Single active term g + b = 0.5 with mu = 10, J = 1.
        let mut rewards = vec![0.0; 3];
        rewards[2] = 1.0;
        let traj = constant_trajectory(rewards, vec![vec![0.5], vec![-1.0]]);
        assert_eq!(penalized_return(&traj, &b, 10.0, 1.0), 1.0 - 10.0 * 0.25);

        // Negative slack contributes nothing.
        let traj = constant_trajectory(vec![0.0; 3], vec![vec![-0.3], vec![-0.3]]);
        assert_eq!(penalized_return(&traj, &b, 10.0, 1.0), 0.0);
    }

    #[test]
    fn zero_penalty_weight_recovers_the_objective() {
        let traj = constant_trajectory(vec![1.0, -0.5, 2.0], vec![vec![3.0], vec![9.0]]);
        let b = BackoffMatrix::from_base(vec![vec![1.0, 2.0]], 1.5);
        for discount in [1.0, 0.9, 0.5] {
            assert_eq!(
                penalized_return(&traj, &b, 0.0, discount),
                objective(&traj, discount)
            );
        }
    }

    #[test]
    fn penalized_return_nonincreasing_in_backoffs() {
        let traj = constant_trajectory(vec![0.0, 0.0, 1.0], vec![vec![-0.1], vec![0.2]]);
        let base = vec![vec![0.5, 0.5]];
        let mut prev = f64::INFINITY;
        for scale in [0.0, 0.25, 0.5, 1.0, 2.0] {
            let b = BackoffMatrix::from_base(base.clone(), scale);
            let v = penalized_return(&traj, &b, 10.0, 1.0);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn joint_indicator_boundary_semantics() {
        let sat = constant_trajectory(vec![0.0; 3], vec![vec![-0.1, -0.1], vec![-0.1, -0.1]]);
        assert!(joint_indicator(&sat));

        let edge = constant_trajectory(vec![0.0; 3], vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        assert!(joint_indicator(&edge));

        let viol = constant_trajectory(vec![0.0; 3], vec![vec![-0.1, 1e-9], vec![-0.1, -0.1]]);
        assert!(!joint_indicator(&viol));
    }

    #[test]
    fn satisfied_trajectory_has_identity_penalty_at_zero_backoff() {
        let traj = constant_trajectory(vec![0.2, 0.3, 0.1], vec![vec![-0.4], vec![-0.2]]);
        assert!(joint_indicator(&traj));
        let b = BackoffMatrix::zeros(1, 2);
        assert_eq!(penalized_return(&traj, &b, 10.0, 1.0), objective(&traj, 1.0));
    }

    proptest::proptest! {
        // Larger tightening never raises the penalized return, and a zero
        // penalty weight always recovers the raw objective.
        #[test]
        fn tightening_never_raises_the_return(
            g in proptest::collection::vec(-1.0f64..0.5, 1..24),
            base in proptest::collection::vec(-0.5f64..0.5, 1..24),
            scale_lo in 0.0f64..2.0,
            scale_hi in 0.0f64..2.0,
            mu in 0.0f64..20.0,
        ) {
            let horizon = g.len().min(base.len());
            let traj = constant_trajectory(
                vec![0.25; horizon + 1],
                g[..horizon].iter().map(|&v| vec![v]).collect(),
            );
            let b = vec![base[..horizon].to_vec()];
            let (lo, hi) = if scale_lo <= scale_hi {
                (scale_lo, scale_hi)
            } else {
                (scale_hi, scale_lo)
            };
            // Nonnegative bases guarantee monotonicity in the scale.
            let b_pos: Vec<Vec<f64>> = b
                .iter()
                .map(|row| row.iter().map(|v| v.abs()).collect())
                .collect();
            let loose = penalized_return(&traj, &BackoffMatrix::from_base(b_pos.clone(), lo), mu, 1.0);
            let tight = penalized_return(&traj, &BackoffMatrix::from_base(b_pos, hi), mu, 1.0);
            proptest::prop_assert!(tight <= loose + 1e-12);

            let free = penalized_return(&traj, &BackoffMatrix::from_base(b, hi), 0.0, 1.0);
            proptest::prop_assert_eq!(free, objective(&traj, 1.0));
        }
    }

    #[test]
    fn backoff_matrix_scaling() {
        let b = BackoffMatrix::from_base(vec![vec![1.0, -2.0], vec![0.5, 0.0]], 0.5);
        assert_eq!(b.value(0, 1), 0.5);
        assert_eq!(b.value(0, 2), -1.0);
        assert_eq!(b.value(1, 1), 0.25);
        let r = b.rescaled(2.0);
        assert_eq!(r.value(0, 2), -4.0);
        assert_eq!(r.base, b.base);
    }
}
