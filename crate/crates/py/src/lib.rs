//! Python bindings: the statistics kernels, experiment configuration,
//! policy objects, and the train / tune / evaluate pipeline.
//!
//! Build with `cargo build -p chance-rl-py --release`; the resulting
//! `libchance_rl.so` imports as the module `chance_rl` once renamed (see
//! python/smoke_test.py).

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use chance_rl_core::backoff::{self, TuneOutcome, TuneResult};
use chance_rl_core::checkpoint::Checkpoint;
use chance_rl_core::config::ExperimentConfig;
use chance_rl_core::policy::{self, PolicyParameters, PolicyWindow};
use chance_rl_core::reinforce::{train_fixed_backoffs, TrainResult};
use chance_rl_core::rollout::{self, BackoffMatrix};
use chance_rl_core::seeding;
use chance_rl_core::stats;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Fraction of trajectories whose joint indicator is true.
#[pyfunction]
fn ecdf_joint_satisfaction(indicator_flags: Vec<bool>) -> PyResult<f64> {
    stats::ecdf_joint_satisfaction(&indicator_flags).map_err(value_err)
}

/// Smallest sample value whose empirical CDF reaches `level`.
#[pyfunction]
fn empirical_quantile(samples: Vec<f64>, level: f64) -> PyResult<f64> {
    let set = stats::SampleSet::new(samples).map_err(value_err)?;
    stats::empirical_quantile(&set, level).map_err(value_err)
}

/// Regularized incomplete beta function I_x(a, b).
#[pyfunction]
fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> PyResult<f64> {
    stats::regularized_incomplete_beta(x, a, b).map_err(value_err)
}

/// Inverse Beta(a, b) CDF.
#[pyfunction]
fn inverse_beta_cdf(p: f64, a: f64, b: f64) -> PyResult<f64> {
    stats::inverse_beta_cdf(p, a, b).map_err(value_err)
}

/// One-sided confidence lower bound on a binomial proportion.
#[pyfunction]
fn f_lower_bound(f_hat: f64, sample_count: usize, epsilon: f64) -> PyResult<f64> {
    stats::f_lower_bound(f_hat, sample_count, epsilon).map_err(value_err)
}

/// Experiment configuration loaded from a TOML file.
#[pyclass(module = "chance_rl", skip_from_py_object)]
#[derive(Clone)]
struct Config {
    inner: ExperimentConfig,
    hash: String,
}

#[pymethods]
impl Config {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, hash) = ExperimentConfig::load(&path).map_err(value_err)?;
        Ok(Self { inner, hash })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = ExperimentConfig::from_toml_str(text).map_err(value_err)?;
        let hash = chance_rl_core::config::config_hash(text.as_bytes());
        Ok(Self { inner, hash })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon
    }

    #[getter]
    fn samples(&self) -> usize {
        self.inner.tuner_samples
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.hash.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(horizon={}, alpha={}, epsilon={}, seed={})",
            self.inner.horizon, self.inner.alpha, self.inner.epsilon, self.inner.seed
        )
    }
}

/// Windowed Gaussian policy parameters.
#[pyclass(module = "chance_rl", skip_from_py_object)]
#[derive(Clone)]
struct Policy {
    inner: PolicyParameters,
}

#[pymethods]
impl Policy {
    /// Fresh parameters drawn from the configuration's architecture.
    #[staticmethod]
    fn initialize(config: &Config, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: config.inner.build_policy(seed).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(&path).map_err(value_err)?.policy,
        })
    }

    #[pyo3(signature = (path, config_hash=None))]
    fn save(&self, path: PathBuf, config_hash: Option<String>) -> PyResult<()> {
        Checkpoint::plain(self.inner.clone(), config_hash.as_deref().unwrap_or(""))
            .save(&path)
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }

    /// Mean and standard deviation at a raw-unit window row.
    fn forward(&self, window: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let window = PolicyWindow::from_raw(&window, &self.inner).map_err(value_err)?;
        let dist = policy::forward(&self.inner, &window).map_err(value_err)?;
        Ok((dist.mean, dist.std))
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn window_dim(&self) -> usize {
        self.inner.window_dim()
    }

    fn __repr__(&self) -> String {
        format!(
            "Policy(window_dim={}, controls={}, params={})",
            self.inner.window_dim(),
            self.inner.n_u(),
            self.inner.param_count()
        )
    }
}

/// One closed-loop rollout as a dictionary of lists.
#[pyfunction]
#[pyo3(signature = (config, policy, seed=None))]
fn sample_trajectory(
    py: Python<'_>,
    config: &Config,
    policy: &Policy,
    seed: Option<u64>,
) -> PyResult<Py<PyDict>> {
    let env = config.inner.build_env().map_err(value_err)?;
    let seed = seed.unwrap_or(config.inner.seed);
    let mut rng = seeding::episode_rng(seed, 0, 0);
    let traj = rollout::sample_trajectory(
        &env,
        &policy.inner,
        config.inner.horizon,
        &mut rng,
        0,
        seed,
    )
    .map_err(runtime_err)?;
    let dict = PyDict::new(py);
    dict.set_item("states", &traj.states)?;
    dict.set_item("controls", &traj.controls)?;
    dict.set_item("raw_controls", &traj.raw_controls)?;
    dict.set_item("rewards", &traj.rewards)?;
    dict.set_item("constraints", &traj.constraints)?;
    dict.set_item("objective", rollout::objective(&traj, config.inner.discount))?;
    dict.set_item("satisfied", rollout::joint_indicator(&traj))?;
    Ok(dict.into())
}

fn history_to_list(py: Python<'_>, history: &[chance_rl_core::reinforce::EpochStats]) -> PyResult<Py<PyList>> {
    let rows = PyList::empty(py);
    for e in history {
        let row = PyDict::new(py);
        row.set_item("epoch", e.epoch)?;
        row.set_item("mean_penalized", e.mean_penalized)?;
        row.set_item("mean_objective", e.mean_objective)?;
        row.set_item("violation_rate", e.violation_rate)?;
        row.set_item("grad_norm", e.grad_norm)?;
        rows.append(row)?;
    }
    Ok(rows.into())
}

/// Unconstrained policy-gradient training (backoffs fixed at zero).
/// Returns the trained policy and the per-epoch history.
#[pyfunction]
#[pyo3(signature = (config, policy=None, episodes=None, epochs=None, seed=None))]
fn train(
    py: Python<'_>,
    config: &Config,
    policy: Option<&Policy>,
    episodes: Option<usize>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> PyResult<(Policy, Py<PyList>)> {
    let cfg = &config.inner;
    let env = cfg.build_env().map_err(value_err)?;
    let seed = seed.unwrap_or(cfg.seed);
    let params = match policy {
        Some(p) => p.inner.clone(),
        None => cfg.build_policy(seed).map_err(value_err)?,
    };
    let mut train_cfg = cfg.step1_training(seed);
    if let Some(k) = episodes {
        train_cfg.episodes = k;
    }
    if let Some(n) = epochs {
        train_cfg.epochs = n;
    }
    let horizon = cfg.horizon;
    let result: TrainResult = py
        .detach(|| {
            train_fixed_backoffs(&env, params, &BackoffMatrix::zeros(2, horizon), &train_cfg)
        })
        .map_err(runtime_err)?;
    Ok((
        Policy {
            inner: result.params,
        },
        history_to_list(py, &result.history)?,
    ))
}

/// Fresh-rollout evaluation: satisfaction estimate, lower bound, objective
/// statistics.
#[pyfunction]
#[pyo3(signature = (config, policy, samples=None, seed=None, epsilon=None))]
fn evaluate(
    py: Python<'_>,
    config: &Config,
    policy: &Policy,
    samples: Option<usize>,
    seed: Option<u64>,
    epsilon: Option<f64>,
) -> PyResult<Py<PyDict>> {
    let cfg = &config.inner;
    let env = cfg.build_env().map_err(value_err)?;
    let samples = samples.unwrap_or(cfg.tuner_samples);
    let epsilon = epsilon.unwrap_or(cfg.epsilon);
    let seed = seed.unwrap_or(cfg.seed);
    let discount = cfg.discount;
    let params = policy.inner.clone();
    let report = py
        .detach(|| backoff::evaluate_policy(&env, &params, samples, epsilon, discount, seed))
        .map_err(runtime_err)?;
    let dict = PyDict::new(py);
    dict.set_item("f_hat", report.estimate.f_hat)?;
    dict.set_item("f_lb", report.estimate.f_lb)?;
    dict.set_item("epsilon", report.estimate.epsilon)?;
    dict.set_item("samples", report.estimate.sample_count)?;
    dict.set_item("mean_objective", report.mean_objective)?;
    dict.set_item("mean_terminal", report.mean_terminal)?;
    dict.set_item("std_terminal", report.std_terminal)?;
    Ok(dict.into())
}

/// Full backoff tuning. Returns the tuned policy and a result dictionary
/// (outcome, tightening scale, backoff matrix, per-iteration trace).
#[pyfunction]
#[pyo3(signature = (config, policy=None, seed=None))]
fn tune(
    py: Python<'_>,
    config: &Config,
    policy: Option<&Policy>,
    seed: Option<u64>,
) -> PyResult<(Policy, Py<PyDict>)> {
    let cfg = &config.inner;
    let env = cfg.build_env().map_err(value_err)?;
    let seed = seed.unwrap_or(cfg.seed);
    let tuner_cfg = cfg.tuner_config(seed);
    let inner = cfg.inner_training(seed);
    let (params, step1) = match policy {
        Some(p) => (p.inner.clone(), None),
        None => (
            cfg.build_policy(seed).map_err(value_err)?,
            Some(cfg.step1_training(seed)),
        ),
    };
    let result: TuneResult = py
        .detach(|| backoff::tune(&env, params, &tuner_cfg, &inner, step1.as_ref()))
        .map_err(runtime_err)?;

    let dict = PyDict::new(py);
    dict.set_item(
        "outcome",
        match result.outcome {
            TuneOutcome::Converged => "converged",
            TuneOutcome::FeasibleSide => "feasible_side",
        },
    )?;
    dict.set_item("tighten_scale", result.tighten_scale)?;
    dict.set_item("f_hat", result.evaluation.estimate.f_hat)?;
    dict.set_item("f_lb", result.evaluation.estimate.f_lb)?;
    dict.set_item("mean_terminal", result.evaluation.mean_terminal)?;
    dict.set_item("backoffs", &result.backoffs.values)?;
    dict.set_item("base_backoffs", &result.backoffs.base)?;
    let trace = PyList::empty(py);
    for row in &result.trace {
        let r = PyDict::new(py);
        r.set_item("iteration", row.iteration)?;
        r.set_item("gamma", row.gamma)?;
        r.set_item("f_hat", row.f_hat)?;
        r.set_item("f_lb", row.f_lb)?;
        r.set_item("e", row.e)?;
        r.set_item("bracket", (row.bracket_low, row.bracket_high))?;
        r.set_item("mean_objective", row.mean_objective)?;
        trace.append(r)?;
    }
    dict.set_item("trace", trace)?;
    Ok((
        Policy {
            inner: result.params,
        },
        dict.into(),
    ))
}

#[pymodule]
fn chance_rl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<Policy>()?;
    m.add_function(wrap_pyfunction!(ecdf_joint_satisfaction, m)?)?;
    m.add_function(wrap_pyfunction!(empirical_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(regularized_incomplete_beta, m)?)?;
    m.add_function(wrap_pyfunction!(inverse_beta_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(f_lower_bound, m)?)?;
    m.add_function(wrap_pyfunction!(sample_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(tune, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
