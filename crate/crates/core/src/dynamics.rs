//! Uncertain-dynamics contract and fixed-step ODE integration.
//!
//! A control interval holds the input constant (zero-order hold) while the
//! continuous plant is advanced by composed classical Runge-Kutta steps.
//! Fixed steps keep cost deterministic and trajectories bitwise reproducible,
//! which matters more here than adaptivity: the case-study kinetics are
//! smooth.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("ODE blow-up: non-finite derivative near state {state:?}")]
    OdeBlowUp { state: Vec<f64> },
    #[error("integration settings invalid: {0}")]
    InvalidSettings(String),
    #[error("uncertainty draw failed: {0}")]
    DrawFailed(String),
    #[error("constraint evaluation degenerate: {0}")]
    DegenerateConstraint(String),
}

/// Zero-order-hold integration settings for one control interval.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct IntegrationSettings {
    /// Time units spanned by one control step.
    pub interval_duration: f64,
    /// Number of RK4 substeps per control step.
    pub substeps: usize,
}

impl IntegrationSettings {
    pub fn new(interval_duration: f64, substeps: usize) -> Result<Self, DynamicsError> {
        if !(interval_duration > 0.0) {
            return Err(DynamicsError::InvalidSettings(format!(
                "interval duration must be positive, got {interval_duration}"
            )));
        }
        if substeps == 0 {
            return Err(DynamicsError::InvalidSettings(
                "substeps must be at least 1".into(),
            ));
        }
        Ok(Self {
            interval_duration,
            substeps,
        })
    }
}

fn check_finite(values: &[f64], at: &[f64]) -> Result<(), DynamicsError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DynamicsError::OdeBlowUp { state: at.to_vec() });
    }
    Ok(())
}

/// One classical 4th-order Runge-Kutta step of size `h` under constant
/// control.
pub fn rk4_step<F>(rhs: F, x: &[f64], u: &[f64], h: f64) -> Result<Vec<f64>, DynamicsError>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    if !(h > 0.0) {
        return Err(DynamicsError::InvalidSettings(format!(
            "step size must be positive, got {h}"
        )));
    }
    let n = x.len();
    let k1 = rhs(x, u);
    check_finite(&k1, x)?;

    let x2: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * h * k1[i]).collect();
    let k2 = rhs(&x2, u);
    check_finite(&k2, &x2)?;

    let x3: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * h * k2[i]).collect();
    let k3 = rhs(&x3, u);
    check_finite(&k3, &x3)?;

    let x4: Vec<f64> = (0..n).map(|i| x[i] + h * k3[i]).collect();
    let k4 = rhs(&x4, u);
    check_finite(&k4, &x4)?;

    let next: Vec<f64> = (0..n)
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    check_finite(&next, x)?;
    Ok(next)
}

/// Advances the state over a full control interval by composing RK4 substeps.
pub fn integrate_interval<F>(
    rhs: F,
    x: &[f64],
    u: &[f64],
    settings: &IntegrationSettings,
) -> Result<Vec<f64>, DynamicsError>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    let h = settings.interval_duration / settings.substeps as f64;
    let mut state = x.to_vec();
    for _ in 0..settings.substeps {
        state = rk4_step(&rhs, &state, u, h)?;
    }
    Ok(state)
}

/// Sampling contract of an uncertain Markov transition.
///
/// A `Draw` is the fully realized per-episode uncertainty (initial condition
/// and parameters); for a fixed draw and RNG stream position the transition
/// is deterministic and repeatable.
pub trait EnvTransition {
    type Draw: Clone + Send + Sync;

    /// Realizes one episode's uncertainty.
    fn sample_draw(&self, rng: &mut ChaCha8Rng) -> Result<Self::Draw, DynamicsError>;

    /// Initial state implied by the draw.
    fn initial_state(&self, draw: &Self::Draw) -> Vec<f64>;

    /// Next state given the draw; `rng` carries any per-step noise.
    fn sample_transition(
        &self,
        draw: &Self::Draw,
        x: &[f64],
        u: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>, DynamicsError>;
}
