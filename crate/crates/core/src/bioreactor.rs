//! Fed-batch photo-production environment: Monod-kinetics mass balances for
//! biomass, nitrate and product under parametric uncertainty, with normalized
//! path constraints and a terminal-product reward penalized by control moves.
//!
//! The model assumes a fixed-volume fed-batch; the manipulated variables are
//! light intensity and nitrate inflow. Kinetic constants are not invented
//! here: the shipped configuration carries them with provenance notes and
//! refuses to run without them.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{integrate_interval, DynamicsError, EnvTransition, IntegrationSettings};
use crate::rollout::Environment;

#[derive(Debug, Error)]
pub enum BioreactorError {
    #[error("kinetic parameter {name} must be {requirement}, got {value}")]
    InvalidParameter {
        name: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error("uncertainty spec invalid: {0}")]
    InvalidUncertainty(String),
}

/// Kinetic constants of the mass balance equations.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KineticParameters {
    /// Maximum specific growth rate.
    pub u_m: f64,
    /// Light saturation constant of growth.
    pub k_s: f64,
    /// Light inhibition constant of growth.
    pub k_i: f64,
    /// Nitrate half-saturation constant.
    pub k_n: f64,
    /// Specific decay rate.
    pub u_d: f64,
    /// Nitrate yield per unit biomass growth.
    pub y_nx: f64,
    /// Maximum specific production rate.
    pub k_m: f64,
    /// Light saturation constant of production.
    pub k_sq: f64,
    /// Light inhibition constant of production.
    pub k_iq: f64,
    /// Product degradation rate.
    pub k_d: f64,
    /// Nitrate constant of product degradation.
    pub k_nq: f64,
}

impl KineticParameters {
    /// Positivity checks. The decay rate may legitimately be zero (the
    /// companion parameter set uses u_d = 0), so it is only required to be
    /// nonnegative; constants appearing in denominators must be positive.
    pub fn validate(&self) -> Result<(), BioreactorError> {
        let positive: [(&'static str, f64); 9] = [
            ("u_m", self.u_m),
            ("k_s", self.k_s),
            ("k_i", self.k_i),
            ("k_n", self.k_n),
            ("y_nx", self.y_nx),
            ("k_m", self.k_m),
            ("k_sq", self.k_sq),
            ("k_iq", self.k_iq),
            ("k_nq", self.k_nq),
        ];
        for (name, value) in positive {
            if !(value > 0.0) {
                return Err(BioreactorError::InvalidParameter {
                    name,
                    requirement: "positive",
                    value,
                });
            }
        }
        for (name, value) in [("u_d", self.u_d), ("k_d", self.k_d)] {
            if !(value >= 0.0) {
                return Err(BioreactorError::InvalidParameter {
                    name,
                    requirement: "nonnegative",
                    value,
                });
            }
        }
        Ok(())
    }
}

/// Mean and spread of one Gaussian parameter.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mean: f64,
    pub spread: f64,
}

/// How the `spread` field of a [`GaussianSpec`] is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpreadKind {
    /// Spread is the standard deviation (a 10% spread of the mean reads as
    /// sigma = 0.1 * mean).
    #[default]
    StdDev,
    /// Spread is the variance.
    Variance,
}

impl SpreadKind {
    fn std_dev(&self, spread: f64) -> f64 {
        match self {
            SpreadKind::StdDev => spread,
            SpreadKind::Variance => spread.sqrt(),
        }
    }
}

/// Distributions of the uncertain initial state and kinetic parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UncertaintySpec {
    /// Means of [biomass, nitrate, product] at t = 0.
    pub initial_mean: [f64; 3],
    /// Diagonal of the initial-state covariance (variance entries).
    pub initial_variance: [f64; 3],
    pub k_s: GaussianSpec,
    pub k_i: GaussianSpec,
    pub k_n: GaussianSpec,
    /// Interpretation of the parameter spreads.
    #[serde(default)]
    pub spread_kind: SpreadKind,
}

impl UncertaintySpec {
    pub fn validate(&self) -> Result<(), BioreactorError> {
        if self.initial_variance.iter().any(|v| *v < 0.0) {
            return Err(BioreactorError::InvalidUncertainty(
                "initial variances must be nonnegative".into(),
            ));
        }
        if self.initial_mean[0] <= 0.0 || self.initial_mean[1] <= 0.0 {
            return Err(BioreactorError::InvalidUncertainty(
                "initial biomass and nitrate means must be positive".into(),
            ));
        }
        for (name, g) in [("k_s", self.k_s), ("k_i", self.k_i), ("k_n", self.k_n)] {
            if g.mean <= 0.0 || g.spread < 0.0 {
                return Err(BioreactorError::InvalidUncertainty(format!(
                    "{name} needs a positive mean and nonnegative spread"
                )));
            }
        }
        Ok(())
    }
}

/// Normalized path constraints: nitrate cap and product-to-biomass ratio.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub nitrate_cap: f64,
    pub product_ratio: f64,
}

impl Default for ConstraintSpec {
    fn default() -> Self {
        Self {
            nitrate_cap: 800.0,
            product_ratio: 0.011,
        }
    }
}

/// Quadratic penalty weights on control moves; the terminal reward is the
/// final product concentration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RewardSpec {
    pub du_penalty: [f64; 2],
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            du_penalty: [3.125e-8, 3.125e-6],
        }
    }
}

/// Hard control box: light intensity and nitrate inflow.
pub const CONTROL_BOUNDS: [(f64, f64); 2] = [(120.0, 400.0), (0.0, 40.0)];

/// Mass balances for [biomass, nitrate, product]. Concentrations are clipped
/// at zero before evaluation: the Monod terms are physical only for
/// nonnegative values and integration substeps may overshoot slightly.
pub fn mass_balance_rhs(x: &[f64], u: &[f64], p: &KineticParameters) -> Vec<f64> {
    let c_x = x[0].max(0.0);
    let c_n = x[1].max(0.0);
    let c_q = x[2].max(0.0);
    let light = u[0];
    let inflow = u[1];

    let light_growth = light / (light + p.k_s + light * light / p.k_i);
    let light_production = light / (light + p.k_sq + light * light / p.k_iq);
    let nitrate_factor = c_n / (c_n + p.k_n);

    let growth = p.u_m * light_growth * c_x * nitrate_factor;
    vec![
        growth - p.u_d * c_x,
        -p.y_nx * growth + inflow,
        p.k_m * light_production * c_x * nitrate_factor - p.k_d * c_q / (c_n + p.k_nq),
    ]
}

/// One episode's realized uncertainty: initial state and kinetic constants.
#[derive(Debug, Clone)]
pub struct BioreactorDraw {
    pub initial_state: Vec<f64>,
    pub params: KineticParameters,
}

/// The full case-study environment.
#[derive(Debug, Clone)]
pub struct BioreactorEnv {
    pub nominal: KineticParameters,
    pub uncertainty: UncertaintySpec,
    pub constraints: ConstraintSpec,
    pub reward: RewardSpec,
    pub horizon: usize,
    pub integration: IntegrationSettings,
}

impl BioreactorEnv {
    pub fn new(
        nominal: KineticParameters,
        uncertainty: UncertaintySpec,
        constraints: ConstraintSpec,
        reward: RewardSpec,
        horizon: usize,
        integration: IntegrationSettings,
    ) -> Result<Self, BioreactorError> {
        nominal.validate()?;
        uncertainty.validate()?;
        Ok(Self {
            nominal,
            uncertainty,
            constraints,
            reward,
            horizon,
            integration,
        })
    }

    /// Gaussian draws for the uncertain initial concentrations and kinetic
    /// constants; draws that land nonpositive are redrawn (truncation), and
    /// one hundred failures in a row abort.
    pub fn sample_uncertainty(
        &self,
        rng: &mut ChaCha8Rng,
    ) -> Result<BioreactorDraw, DynamicsError> {
        let spec = &self.uncertainty;
        let draw_positive = |mean: f64,
                             std: f64,
                             name: &str,
                             rng: &mut ChaCha8Rng|
         -> Result<f64, DynamicsError> {
            let dist = Normal::new(mean, std)
                .map_err(|e| DynamicsError::DrawFailed(format!("{name}: {e}")))?;
            for _ in 0..100 {
                let v = dist.sample(rng);
                if v > 0.0 || (mean == 0.0 && std == 0.0) {
                    return Ok(v.max(0.0));
                }
            }
            Err(DynamicsError::DrawFailed(format!(
                "{name}: 100 consecutive nonpositive draws from N({mean}, {std}^2)"
            )))
        };

        let c_x0 = draw_positive(
            spec.initial_mean[0],
            spec.initial_variance[0].sqrt(),
            "biomass(0)",
            rng,
        )?;
        let c_n0 = draw_positive(
            spec.initial_mean[1],
            spec.initial_variance[1].sqrt(),
            "nitrate(0)",
            rng,
        )?;
        // Product starts the batch at exactly zero.
        let initial_state = vec![c_x0, c_n0, 0.0];

        let mut params = self.nominal;
        params.k_s = draw_positive(
            spec.k_s.mean,
            spec.spread_kind.std_dev(spec.k_s.spread),
            "k_s",
            rng,
        )?;
        params.k_i = draw_positive(
            spec.k_i.mean,
            spec.spread_kind.std_dev(spec.k_i.spread),
            "k_i",
            rng,
        )?;
        params.k_n = draw_positive(
            spec.k_n.mean,
            spec.spread_kind.std_dev(spec.k_n.spread),
            "k_n",
            rng,
        )?;
        Ok(BioreactorDraw {
            initial_state,
            params,
        })
    }

    /// Normalized constraints `[c_N/cap - 1, c_q/(ratio * c_x) - 1]`.
    pub fn evaluate_constraints(&self, x: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        if x[0] <= 0.0 {
            return Err(DynamicsError::DegenerateConstraint(format!(
                "biomass {} <= 0 degenerates the product-ratio normalization",
                x[0]
            )));
        }
        Ok(vec![
            x[1] / self.constraints.nitrate_cap - 1.0,
            x[2] / (self.constraints.product_ratio * x[0]) - 1.0,
        ])
    }
}

impl EnvTransition for BioreactorEnv {
    type Draw = BioreactorDraw;

    fn sample_draw(&self, rng: &mut ChaCha8Rng) -> Result<Self::Draw, DynamicsError> {
        self.sample_uncertainty(rng)
    }

    fn initial_state(&self, draw: &Self::Draw) -> Vec<f64> {
        draw.initial_state.clone()
    }

    fn sample_transition(
        &self,
        draw: &Self::Draw,
        x: &[f64],
        u: &[f64],
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>, DynamicsError> {
        let next = integrate_interval(
            |x, u| mass_balance_rhs(x, u, &draw.params),
            x,
            u,
            &self.integration,
        )?;
        // Projection keeps tiny integration overshoots physical.
        Ok(next.into_iter().map(|v| v.max(0.0)).collect())
    }
}

impl Environment for BioreactorEnv {
    fn state_dim(&self) -> usize {
        3
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn control_bounds(&self) -> Vec<(f64, f64)> {
        CONTROL_BOUNDS.to_vec()
    }

    fn constraint_count(&self) -> usize {
        2
    }

    fn constraints(&self, x: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        self.evaluate_constraints(x)
    }

    fn stage_reward(&self, _t: usize, _x: &[f64], u: &[f64], u_prev: &[f64]) -> f64 {
        let mut penalty = 0.0;
        for i in 0..2 {
            let du = u[i] - u_prev[i];
            penalty += self.reward.du_penalty[i] * du * du;
        }
        -penalty
    }

    fn terminal_reward(&self, x: &[f64]) -> f64 {
        x[2]
    }
}

/// Test fixtures shared by the unit tests of several modules.
#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Kinetic constants of the companion parameter set used throughout the
    /// tests (the shipped configuration documents their provenance).
    pub(crate) fn reference_params() -> KineticParameters {
        KineticParameters {
            u_m: 0.0572,
            k_s: 178.9,
            k_i: 447.1,
            k_n: 393.1,
            u_d: 0.0,
            y_nx: 504.5,
            k_m: 0.00016,
            k_sq: 23.51,
            k_iq: 800.0,
            k_d: 0.281,
            k_nq: 16.89,
        }
    }

    pub(crate) fn reference_uncertainty() -> UncertaintySpec {
        UncertaintySpec {
            initial_mean: [1.0, 150.0, 0.0],
            initial_variance: [1e-3, 22.5, 0.0],
            k_s: GaussianSpec {
                mean: 178.9,
                spread: 17.89,
            },
            k_i: GaussianSpec {
                mean: 447.1,
                spread: 44.71,
            },
            k_n: GaussianSpec {
                mean: 393.1,
                spread: 39.31,
            },
            spread_kind: SpreadKind::StdDev,
        }
    }

    pub(crate) fn reference_env(horizon: usize) -> BioreactorEnv {
        BioreactorEnv::new(
            reference_params(),
            reference_uncertainty(),
            ConstraintSpec::default(),
            RewardSpec::default(),
            horizon,
            IntegrationSettings::new(20.0, 10).unwrap(),
        )
        .unwrap()
    }

    pub(crate) fn zero_variance_env(horizon: usize) -> BioreactorEnv {
        let mut env = reference_env(horizon);
        env.uncertainty.initial_variance = [0.0; 3];
        env.uncertainty.k_s.spread = 0.0;
        env.uncertainty.k_i.spread = 0.0;
        env.uncertainty.k_n.spread = 0.0;
        env
    }
}
