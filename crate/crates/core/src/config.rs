//! Experiment configuration: a single TOML file holding the environment,
//! policy, training and tuner sections.
//!
//! Hyperparameters of the published setup ship as defaults. The kinetic
//! constants of the case study are adopted from an external companion
//! reference, so they are REQUIRED fields with provenance notes in the
//! shipped file and are never silently defaulted.

use serde::Deserialize;
use std::path::Path;
use thiserror::Error;

use crate::backoff::TunerConfig;
use crate::bioreactor::{
    BioreactorEnv, BioreactorError, ConstraintSpec, GaussianSpec, KineticParameters, RewardSpec,
    SpreadKind, UncertaintySpec,
};
use crate::dynamics::{DynamicsError, IntegrationSettings};
use crate::policy::{PolicyArchitecture, PolicyError, PolicyParameters};
use crate::reinforce::TrainingConfig;
use crate::seeding::{self, domain};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("parameter {0} requires a value (see provenance note)")]
    MissingParameter(&'static str),
    #[error("config invalid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Bioreactor(#[from] BioreactorError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

fn default_substeps() -> usize {
    10
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKinetics {
    // Adopted from the companion reference: required, no defaults.
    u_m: Option<f64>,
    u_d: Option<f64>,
    y_nx: Option<f64>,
    k_m: Option<f64>,
    k_sq: Option<f64>,
    k_iq: Option<f64>,
    k_d: Option<f64>,
    k_nq: Option<f64>,
    // Nominal values of the uncertain constants default to their published
    // distribution means.
    #[serde(default = "default_k_s")]
    k_s: f64,
    #[serde(default = "default_k_i")]
    k_i: f64,
    #[serde(default = "default_k_n")]
    k_n: f64,
}

fn default_k_s() -> f64 {
    178.9
}
fn default_k_i() -> f64 {
    447.1
}
fn default_k_n() -> f64 {
    393.1
}

fn default_initial_mean() -> [f64; 3] {
    [1.0, 150.0, 0.0]
}
fn default_initial_variance() -> [f64; 3] {
    [1e-3, 22.5, 0.0]
}
fn default_k_s_dist() -> GaussianSpec {
    GaussianSpec {
        mean: 178.9,
        spread: 17.89,
    }
}
fn default_k_i_dist() -> GaussianSpec {
    GaussianSpec {
        mean: 447.1,
        spread: 44.71,
    }
}
fn default_k_n_dist() -> GaussianSpec {
    GaussianSpec {
        mean: 393.1,
        spread: 39.31,
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUncertainty {
    #[serde(default = "default_initial_mean")]
    initial_mean: [f64; 3],
    #[serde(default = "default_initial_variance")]
    initial_variance: [f64; 3],
    #[serde(default = "default_k_s_dist")]
    k_s: GaussianSpec,
    #[serde(default = "default_k_i_dist")]
    k_i: GaussianSpec,
    #[serde(default = "default_k_n_dist")]
    k_n: GaussianSpec,
    #[serde(default)]
    spread_kind: SpreadKind,
}

impl Default for RawUncertainty {
    fn default() -> Self {
        Self {
            initial_mean: default_initial_mean(),
            initial_variance: default_initial_variance(),
            k_s: default_k_s_dist(),
            k_i: default_k_i_dist(),
            k_n: default_k_n_dist(),
            spread_kind: SpreadKind::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConstraints {
    #[serde(default = "default_nitrate_cap")]
    nitrate_cap: f64,
    #[serde(default = "default_product_ratio")]
    product_ratio: f64,
}

fn default_nitrate_cap() -> f64 {
    800.0
}
fn default_product_ratio() -> f64 {
    0.011
}

impl Default for RawConstraints {
    fn default() -> Self {
        Self {
            nitrate_cap: default_nitrate_cap(),
            product_ratio: default_product_ratio(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReward {
    #[serde(default = "default_du_penalty")]
    du_penalty: [f64; 2],
}

fn default_du_penalty() -> [f64; 2] {
    [3.125e-8, 3.125e-6]
}

impl Default for RawReward {
    fn default() -> Self {
        Self {
            du_penalty: default_du_penalty(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnvironment {
    // Horizon and interval duration come from the companion reference's
    // batch setup: required.
    horizon: Option<usize>,
    interval_duration: Option<f64>,
    #[serde(default = "default_substeps")]
    substeps: usize,
    kinetics: Option<RawKinetics>,
    #[serde(default)]
    uncertainty: RawUncertainty,
    #[serde(default)]
    constraints: RawConstraints,
    #[serde(default)]
    reward: RawReward,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolicy {
    #[serde(default = "default_hidden")]
    hidden: Vec<usize>,
    #[serde(default = "default_sigma_max_frac")]
    sigma_max_frac: f64,
    #[serde(default = "default_sigma_min_frac")]
    sigma_min_frac: f64,
    #[serde(default = "default_init_sigma_frac")]
    init_sigma_frac: f64,
    #[serde(default = "default_state_scales")]
    state_scales: Vec<f64>,
}

fn default_hidden() -> Vec<usize> {
    vec![20, 20, 20, 20]
}
fn default_sigma_max_frac() -> f64 {
    0.25
}
fn default_sigma_min_frac() -> f64 {
    0.01
}
fn default_init_sigma_frac() -> f64 {
    0.2
}
fn default_state_scales() -> Vec<f64> {
    vec![10.0, 800.0, 0.2]
}

impl Default for RawPolicy {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            sigma_max_frac: default_sigma_max_frac(),
            sigma_min_frac: default_sigma_min_frac(),
            init_sigma_frac: default_init_sigma_frac(),
            state_scales: default_state_scales(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPhase {
    episodes: usize,
    epochs: usize,
    #[serde(default = "default_tol")]
    tol: f64,
}

fn default_tol() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTraining {
    #[serde(default = "default_learning_rate")]
    learning_rate: f64,
    #[serde(default = "default_lr_decay")]
    lr_decay: f64,
    #[serde(default = "default_penalty_weight")]
    penalty_weight: f64,
    #[serde(default = "default_discount")]
    discount: f64,
    #[serde(default = "default_history_window")]
    history_window: usize,
    #[serde(default = "default_grad_clip")]
    grad_clip: f64,
    #[serde(default = "default_step1")]
    step1: RawPhase,
    #[serde(default = "default_inner")]
    inner: RawPhase,
}

fn default_learning_rate() -> f64 {
    1e-2
}
fn default_lr_decay() -> f64 {
    1.0
}
fn default_penalty_weight() -> f64 {
    10.0
}
fn default_discount() -> f64 {
    1.0
}
fn default_history_window() -> usize {
    1
}
fn default_grad_clip() -> f64 {
    20.0
}
fn default_step1() -> RawPhase {
    RawPhase {
        episodes: 150,
        epochs: 500,
        tol: default_tol(),
    }
}
fn default_inner() -> RawPhase {
    RawPhase {
        episodes: 50,
        epochs: 500,
        tol: default_tol(),
    }
}

impl Default for RawTraining {
    fn default() -> Self {
        Self {
            learning_rate: default_learning_rate(),
            lr_decay: default_lr_decay(),
            penalty_weight: default_penalty_weight(),
            discount: default_discount(),
            history_window: default_history_window(),
            grad_clip: default_grad_clip(),
            step1: default_step1(),
            inner: default_inner(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTuner {
    #[serde(default = "default_alpha")]
    alpha: f64,
    #[serde(default = "default_epsilon")]
    epsilon: f64,
    #[serde(default = "default_delta")]
    delta: f64,
    #[serde(default = "default_samples")]
    samples: usize,
    #[serde(default = "default_max_iterations")]
    max_iterations: usize,
    #[serde(default = "default_bracket_high")]
    bracket_high: f64,
    #[serde(default = "default_tol")]
    tolerance: f64,
    #[serde(default = "default_width_tolerance")]
    width_tolerance: f64,
}

fn default_alpha() -> f64 {
    0.01
}
fn default_epsilon() -> f64 {
    0.01
}
fn default_delta() -> f64 {
    0.01
}
fn default_samples() -> usize {
    500
}
fn default_max_iterations() -> usize {
    100
}
fn default_bracket_high() -> f64 {
    2.0
}
fn default_width_tolerance() -> f64 {
    1e-3
}

impl Default for RawTuner {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            epsilon: default_epsilon(),
            delta: default_delta(),
            samples: default_samples(),
            max_iterations: default_max_iterations(),
            bracket_high: default_bracket_high(),
            tolerance: default_tol(),
            width_tolerance: default_width_tolerance(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default = "default_seed")]
    seed: u64,
    environment: Option<RawEnvironment>,
    #[serde(default)]
    policy: RawPolicy,
    #[serde(default)]
    training: Option<RawTraining>,
    #[serde(default)]
    tuner: Option<RawTuner>,
}

fn default_seed() -> u64 {
    2024
}

/// Validated experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub horizon: usize,
    pub interval_duration: f64,
    pub substeps: usize,
    pub kinetics: KineticParameters,
    pub uncertainty: UncertaintySpec,
    pub constraints: ConstraintSpec,
    pub reward: RewardSpec,
    pub policy: PolicyArchitecture,
    pub state_scales: Vec<f64>,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub penalty_weight: f64,
    pub discount: f64,
    pub history_window: usize,
    pub grad_clip: f64,
    pub step1_episodes: usize,
    pub step1_epochs: usize,
    pub step1_tol: f64,
    pub inner_episodes: usize,
    pub inner_epochs: usize,
    pub inner_tol: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub tuner_samples: usize,
    pub max_iterations: usize,
    pub bracket_high: f64,
    pub tuner_tolerance: f64,
    pub width_tolerance: f64,
}

/// FNV-1a hash of the raw config bytes, used to stamp checkpoints and
/// manifests.
pub fn config_hash(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<(Self, String), ConfigError> {
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let text = String::from_utf8_lossy(&bytes);
        let config = Self::from_toml_str(&text)?;
        Ok((config, config_hash(&bytes)))
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::from_raw(raw)
    }

    fn from_raw(raw: RawConfig) -> Result<Self, ConfigError> {
        let env = raw
            .environment
            .ok_or(ConfigError::Invalid("missing [environment] section".into()))?;
        let kin = env
            .kinetics
            .ok_or(ConfigError::MissingParameter("environment.kinetics"))?;
        let kinetics = KineticParameters {
            u_m: kin.u_m.ok_or(ConfigError::MissingParameter("u_m"))?,
            u_d: kin.u_d.ok_or(ConfigError::MissingParameter("u_d"))?,
            y_nx: kin.y_nx.ok_or(ConfigError::MissingParameter("y_nx"))?,
            k_m: kin.k_m.ok_or(ConfigError::MissingParameter("k_m"))?,
            k_sq: kin.k_sq.ok_or(ConfigError::MissingParameter("k_sq"))?,
            k_iq: kin.k_iq.ok_or(ConfigError::MissingParameter("k_iq"))?,
            k_d: kin.k_d.ok_or(ConfigError::MissingParameter("k_d"))?,
            k_nq: kin.k_nq.ok_or(ConfigError::MissingParameter("k_nq"))?,
            k_s: kin.k_s,
            k_i: kin.k_i,
            k_n: kin.k_n,
        };
        kinetics.validate()?;
        let horizon = env
            .horizon
            .ok_or(ConfigError::MissingParameter("horizon"))?;
        let interval_duration = env
            .interval_duration
            .ok_or(ConfigError::MissingParameter("interval_duration"))?;
        if horizon == 0 {
            return Err(ConfigError::Invalid("horizon must be at least 1".into()));
        }

        let uncertainty = UncertaintySpec {
            initial_mean: env.uncertainty.initial_mean,
            initial_variance: env.uncertainty.initial_variance,
            k_s: env.uncertainty.k_s,
            k_i: env.uncertainty.k_i,
            k_n: env.uncertainty.k_n,
            spread_kind: env.uncertainty.spread_kind,
        };
        uncertainty.validate()?;

        let policy = raw.policy;
        if policy.state_scales.len() != 3 {
            return Err(ConfigError::Invalid(format!(
                "policy.state_scales must have 3 entries (one per state), got {}",
                policy.state_scales.len()
            )));
        }
        let training = raw.training.unwrap_or_default();
        let tuner = raw.tuner.unwrap_or_default();

        Ok(Self {
            seed: raw.seed,
            horizon,
            interval_duration,
            substeps: env.substeps,
            kinetics,
            uncertainty,
            constraints: ConstraintSpec {
                nitrate_cap: env.constraints.nitrate_cap,
                product_ratio: env.constraints.product_ratio,
            },
            reward: RewardSpec {
                du_penalty: env.reward.du_penalty,
            },
            policy: PolicyArchitecture {
                hidden_widths: policy.hidden,
                sigma_max_frac: policy.sigma_max_frac,
                sigma_min_frac: policy.sigma_min_frac,
                init_sigma_frac: policy.init_sigma_frac,
            },
            state_scales: policy.state_scales,
            learning_rate: training.learning_rate,
            lr_decay: training.lr_decay,
            penalty_weight: training.penalty_weight,
            discount: training.discount,
            history_window: training.history_window,
            grad_clip: training.grad_clip,
            step1_episodes: training.step1.episodes,
            step1_epochs: training.step1.epochs,
            step1_tol: training.step1.tol,
            inner_episodes: training.inner.episodes,
            inner_epochs: training.inner.epochs,
            inner_tol: training.inner.tol,
            alpha: tuner.alpha,
            epsilon: tuner.epsilon,
            delta: tuner.delta,
            tuner_samples: tuner.samples,
            max_iterations: tuner.max_iterations,
            bracket_high: tuner.bracket_high,
            tuner_tolerance: tuner.tolerance,
            width_tolerance: tuner.width_tolerance,
        })
    }

    pub fn build_env(&self) -> Result<BioreactorEnv, ConfigError> {
        Ok(BioreactorEnv::new(
            self.kinetics,
            self.uncertainty.clone(),
            self.constraints,
            self.reward,
            self.horizon,
            IntegrationSettings::new(self.interval_duration, self.substeps)?,
        )?)
    }

    /// Fresh policy from the architecture section; the seed is mixed into a
    /// dedicated stream so training and initialization never overlap.
    pub fn build_policy(&self, seed: u64) -> Result<PolicyParameters, ConfigError> {
        let mut rng = seeding::episode_rng(
            seeding::derive_seed(seed, domain::POLICY_INIT, 0),
            0,
            0,
        );
        Ok(PolicyParameters::initialize(
            &self.policy,
            &crate::bioreactor::CONTROL_BOUNDS,
            &self.state_scales,
            &mut rng,
        )?)
    }

    /// Step-1 training configuration (backoffs fixed at zero).
    pub fn step1_training(&self, seed: u64) -> TrainingConfig {
        TrainingConfig {
            episodes: self.step1_episodes,
            epochs: self.step1_epochs,
            learning_rate: self.learning_rate,
            lr_decay: self.lr_decay,
            penalty_weight: self.penalty_weight,
            discount: self.discount,
            tol: self.step1_tol,
            history_window: self.history_window,
            grad_clip: self.grad_clip,
            seed,
        }
    }

    /// Per-iteration retraining configuration inside the tuner; the exit
    /// tolerance is the tuner tolerance.
    pub fn inner_training(&self, seed: u64) -> TrainingConfig {
        TrainingConfig {
            episodes: self.inner_episodes,
            epochs: self.inner_epochs,
            learning_rate: self.learning_rate,
            lr_decay: self.lr_decay,
            penalty_weight: self.penalty_weight,
            discount: self.discount,
            tol: self.inner_tol,
            history_window: self.history_window,
            grad_clip: self.grad_clip,
            seed,
        }
    }

    pub fn tuner_config(&self, seed: u64) -> TunerConfig {
        TunerConfig {
            alpha: self.alpha,
            epsilon: self.epsilon,
            delta: self.delta,
            samples: self.tuner_samples,
            max_iterations: self.max_iterations,
            bracket_high: self.bracket_high,
            tolerance: self.tuner_tolerance,
            width_tolerance: self.width_tolerance,
            seed,
        }
    }
}
