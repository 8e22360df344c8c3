//! Miniature environments with analytically known structure, used to
//! validate the gradient estimator and the tuning loop.

use rand_chacha::ChaCha8Rng;

use crate::dynamics::{DynamicsError, EnvTransition};
use crate::rollout::Environment;

/// One-step bandit: a single bounded control, reward `peak - scale * (u -
/// optimum)^2`, no state and no constraints. Its expected return under a
/// Gaussian policy is a smooth two-parameter surface that can be scanned by
/// quadrature, giving a brute-force optimum to compare training against.
#[derive(Debug, Clone)]
pub struct BanditEnv {
    pub optimum: f64,
    pub scale: f64,
    pub peak: f64,
    pub bounds: (f64, f64),
}

impl Default for BanditEnv {
    fn default() -> Self {
        Self {
            optimum: 0.3,
            scale: 4.0,
            peak: 1.0,
            bounds: (0.0, 1.0),
        }
    }
}

impl BanditEnv {
    pub fn reward(&self, u: f64) -> f64 {
        let d = u - self.optimum;
        self.peak - self.scale * d * d
    }
}

impl EnvTransition for BanditEnv {
    type Draw = ();

    fn sample_draw(&self, _rng: &mut ChaCha8Rng) -> Result<(), DynamicsError> {
        Ok(())
    }

    fn initial_state(&self, _draw: &()) -> Vec<f64> {
        vec![0.0]
    }

    fn sample_transition(
        &self,
        _draw: &(),
        _x: &[f64],
        u: &[f64],
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>, DynamicsError> {
        Ok(vec![u[0]])
    }
}

impl Environment for BanditEnv {
    fn state_dim(&self) -> usize {
        1
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn horizon(&self) -> usize {
        1
    }

    fn control_bounds(&self) -> Vec<(f64, f64)> {
        vec![self.bounds]
    }

    fn constraint_count(&self) -> usize {
        0
    }

    fn constraints(&self, _x: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        Ok(vec![])
    }

    fn stage_reward(&self, _t: usize, _x: &[f64], u: &[f64], _u_prev: &[f64]) -> f64 {
        self.reward(u[0])
    }

    fn terminal_reward(&self, _x: &[f64]) -> f64 {
        0.0
    }
}

/// Deterministic scalar environment with a single constant-valued
/// constraint: with a negative value every rollout satisfies it, with a
/// positive value none can. Useful for pinning the tuner's terminal
/// behaviors, and for band-collapse checks under a deterministic policy.
#[derive(Debug, Clone)]
pub struct ConstantConstraintEnv {
    pub horizon: usize,
    pub constraint_value: f64,
}

impl ConstantConstraintEnv {
    /// Every trajectory satisfies the constraint with margin one.
    pub fn satisfied(horizon: usize) -> Self {
        Self {
            horizon,
            constraint_value: -1.0,
        }
    }

    /// No trajectory can satisfy the constraint.
    pub fn violated(horizon: usize) -> Self {
        Self {
            horizon,
            constraint_value: 1.0,
        }
    }
}

impl EnvTransition for ConstantConstraintEnv {
    type Draw = ();

    fn sample_draw(&self, _rng: &mut ChaCha8Rng) -> Result<(), DynamicsError> {
        Ok(())
    }

    fn initial_state(&self, _draw: &()) -> Vec<f64> {
        vec![0.0]
    }

    fn sample_transition(
        &self,
        _draw: &(),
        x: &[f64],
        u: &[f64],
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>, DynamicsError> {
        Ok(vec![x[0] + 0.1 * u[0]])
    }
}

impl Environment for ConstantConstraintEnv {
    fn state_dim(&self) -> usize {
        1
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn control_bounds(&self) -> Vec<(f64, f64)> {
        vec![(-1.0, 1.0)]
    }

    fn constraint_count(&self) -> usize {
        1
    }

    fn constraints(&self, _x: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        Ok(vec![self.constraint_value])
    }

    fn stage_reward(&self, _t: usize, _x: &[f64], _u: &[f64], _u_prev: &[f64]) -> f64 {
        0.0
    }

    fn terminal_reward(&self, x: &[f64]) -> f64 {
        x[0]
    }
}
