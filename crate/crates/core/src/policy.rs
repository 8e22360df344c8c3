//! Stochastic memory-window policy with exact manual gradients.
//!
//! The policy maps a window of recent states and controls through a stack of
//! leaky-rectified hidden layers into a bounded Gaussian: the mean head is
//! squashed per dimension into the hard control box by a logistic map, the
//! standard-deviation head into [sigma_min, sigma_max] (sigma_min defaults
//! near zero; a small positive floor keeps exploration from dying and bounds
//! the score terms). The log-density and its gradient with respect to every
//! weight and bias are computed by hand-rolled reverse mode, which keeps the
//! score-function estimator exact.
//!
//! Window entries are normalized before entering the network (states divided
//! by configured scales, controls mapped to [-1/2, 1/2] over their box);
//! missing history before t = 2 is zero-padded.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Negative slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Floor applied to the standard deviation to keep densities finite.
pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("target control outside bounds: {0}")]
    TargetOutOfBounds(String),
}

/// One fully connected layer, row-major weights of shape out x in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub out_dim: usize,
    pub in_dim: usize,
}

impl Dense {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weights: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
            out_dim,
            in_dim,
        }
    }

    fn uniform(out_dim: usize, in_dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let limit = scale / (in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limits");
        Self {
            weights: (0..out_dim * in_dim).map(|_| dist.sample(rng)).collect(),
            bias: vec![0.0; out_dim],
            out_dim,
            in_dim,
        }
    }

    fn affine(&self, input: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for r in 0..self.out_dim {
            let row = &self.weights[r * self.in_dim..(r + 1) * self.in_dim];
            let mut acc = 0.0;
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out[r] += acc;
        }
        out
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Architecture knobs for [`PolicyParameters::initialize`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyArchitecture {
    /// Hidden layer widths; may be empty for a heads-only policy.
    pub hidden_widths: Vec<usize>,
    /// Standard-deviation cap as a fraction of each control range.
    pub sigma_max_frac: f64,
    /// Standard-deviation floor as a fraction of each control range. A
    /// small positive floor keeps exploration alive and bounds the score
    /// terms (u - mean)/sigma^2; zero recovers the pure logistic map.
    #[serde(default)]
    pub sigma_min_frac: f64,
    /// Initial standard deviation as a fraction of each control range.
    pub init_sigma_frac: f64,
}

impl Default for PolicyArchitecture {
    fn default() -> Self {
        Self {
            hidden_widths: vec![20, 20, 20, 20],
            sigma_max_frac: 0.25,
            sigma_min_frac: 0.01,
            init_sigma_frac: 0.2,
        }
    }
}

/// All weights, biases and output heads of the windowed Gaussian policy,
/// together with the input normalization it was trained with.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyParameters {
    pub hidden: Vec<Dense>,
    pub mean_head: Dense,
    pub std_head: Dense,
    /// Hard control box; also the target of the mean squashing.
    pub bounds: Vec<(f64, f64)>,
    pub sigma_max_frac: f64,
    #[serde(default)]
    pub sigma_min_frac: f64,
    /// Per-state divisors applied to window entries.
    pub state_scales: Vec<f64>,
}

impl PolicyParameters {
    /// Draws fresh parameters: scaled uniform fan-in weights, with the
    /// std head biased so the initial sigma sits near
    /// `init_sigma_frac * range` for every control.
    pub fn initialize(
        arch: &PolicyArchitecture,
        bounds: &[(f64, f64)],
        state_scales: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, PolicyError> {
        if bounds.is_empty() || state_scales.is_empty() {
            return Err(PolicyError::InvalidArchitecture(
                "need at least one control and one state dimension".into(),
            ));
        }
        for &(lb, ub) in bounds {
            if !(ub > lb) {
                return Err(PolicyError::InvalidArchitecture(format!(
                    "control bounds must satisfy lb < ub, got [{lb}, {ub}]"
                )));
            }
        }
        if state_scales.iter().any(|s| !(*s > 0.0)) {
            return Err(PolicyError::InvalidArchitecture(
                "state scales must be positive".into(),
            ));
        }
        if !(arch.sigma_max_frac > 0.0) {
            return Err(PolicyError::InvalidArchitecture(
                "sigma_max_frac must be positive".into(),
            ));
        }
        if !(arch.sigma_min_frac >= 0.0 && arch.sigma_min_frac < arch.sigma_max_frac) {
            return Err(PolicyError::InvalidArchitecture(format!(
                "sigma_min_frac must lie in [0, sigma_max_frac={})",
                arch.sigma_max_frac
            )));
        }
        if !(arch.init_sigma_frac > arch.sigma_min_frac
            && arch.init_sigma_frac < arch.sigma_max_frac)
        {
            return Err(PolicyError::InvalidArchitecture(format!(
                "init_sigma_frac must lie in (sigma_min_frac={}, sigma_max_frac={})",
                arch.sigma_min_frac, arch.sigma_max_frac
            )));
        }
        let n_u = bounds.len();
        let n_x = state_scales.len();
        let input_dim = 3 * n_x + 2 * n_u;

        let mut hidden = Vec::with_capacity(arch.hidden_widths.len());
        let mut fan_in = input_dim;
        for &width in &arch.hidden_widths {
            if width == 0 {
                return Err(PolicyError::InvalidArchitecture(
                    "hidden width must be positive".into(),
                ));
            }
            hidden.push(Dense::uniform(width, fan_in, 1.0, rng));
            fan_in = width;
        }
        let mean_head = Dense::uniform(n_u, fan_in, 1.0, rng);
        // Small weights keep the initial sigma pinned by the bias alone.
        let mut std_head = Dense::uniform(n_u, fan_in, 0.01, rng);
        let frac = (arch.init_sigma_frac - arch.sigma_min_frac)
            / (arch.sigma_max_frac - arch.sigma_min_frac);
        let bias = (frac / (1.0 - frac)).ln();
        std_head.bias.iter_mut().for_each(|b| *b = bias);

        Ok(Self {
            hidden,
            mean_head,
            std_head,
            bounds: bounds.to_vec(),
            sigma_max_frac: arch.sigma_max_frac,
            sigma_min_frac: arch.sigma_min_frac,
            state_scales: state_scales.to_vec(),
        })
    }

    pub fn n_u(&self) -> usize {
        self.bounds.len()
    }

    pub fn n_x(&self) -> usize {
        self.state_scales.len()
    }

    /// Flattened window dimension: three states plus two controls.
    pub fn window_dim(&self) -> usize {
        3 * self.n_x() + 2 * self.n_u()
    }

    pub fn sigma_max(&self, dim: usize) -> f64 {
        let (lb, ub) = self.bounds[dim];
        self.sigma_max_frac * (ub - lb)
    }

    pub fn sigma_min(&self, dim: usize) -> f64 {
        let (lb, ub) = self.bounds[dim];
        self.sigma_min_frac * (ub - lb)
    }

    pub fn param_count(&self) -> usize {
        self.hidden.iter().map(Dense::param_count).sum::<usize>()
            + self.mean_head.param_count()
            + self.std_head.param_count()
    }

    /// Canonical flat view: hidden layers in order (weights then bias),
    /// then the mean head, then the std head.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in self.hidden.iter().chain([&self.mean_head, &self.std_head]) {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    /// Writes a flat vector (same layout as [`flatten`](Self::flatten)) back
    /// into the parameters.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<(), PolicyError> {
        if flat.len() != self.param_count() {
            return Err(PolicyError::DimensionMismatch(format!(
                "flat vector has {} entries, policy has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        for layer in self
            .hidden
            .iter_mut()
            .chain([&mut self.mean_head, &mut self.std_head])
        {
            let w_len = layer.weights.len();
            layer.weights.copy_from_slice(&flat[at..at + w_len]);
            at += w_len;
            let b_len = layer.bias.len();
            layer.bias.copy_from_slice(&flat[at..at + b_len]);
            at += b_len;
        }
        Ok(())
    }

    fn check_window(&self, window: &PolicyWindow) -> Result<(), PolicyError> {
        if window.values.len() != self.window_dim() {
            return Err(PolicyError::DimensionMismatch(format!(
                "window has {} entries, policy expects {}",
                window.values.len(),
                self.window_dim()
            )));
        }
        Ok(())
    }
}

/// Normalized, zero-padded network input `[x_t, x_{t-1}, x_{t-2}, u_{t-1},
/// u_{t-2}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyWindow {
    pub values: Vec<f64>,
}

impl PolicyWindow {
    /// Builds the window for step `t` from episode history. `states` must
    /// hold x_0..x_t and `controls` u_0..u_{t-1}, in raw units.
    pub fn from_history(
        states: &[Vec<f64>],
        controls: &[Vec<f64>],
        t: usize,
        params: &PolicyParameters,
    ) -> Self {
        let n_x = params.n_x();
        let n_u = params.n_u();
        let mut values = Vec::with_capacity(3 * n_x + 2 * n_u);
        for back in 0..3 {
            if t >= back {
                let x = &states[t - back];
                for i in 0..n_x {
                    values.push(x[i] / params.state_scales[i]);
                }
            } else {
                values.extend(std::iter::repeat(0.0).take(n_x));
            }
        }
        for back in 1..=2 {
            if t >= back {
                let u = &controls[t - back];
                for i in 0..n_u {
                    let (lb, ub) = params.bounds[i];
                    values.push((u[i] - lb) / (ub - lb) - 0.5);
                }
            } else {
                values.extend(std::iter::repeat(0.0).take(n_u));
            }
        }
        Self { values }
    }

    /// Normalizes a raw-unit window row `[x_t, x_{t-1}, x_{t-2}, u_{t-1},
    /// u_{t-2}]`, as read from a pretraining dataset.
    pub fn from_raw(raw: &[f64], params: &PolicyParameters) -> Result<Self, PolicyError> {
        let n_x = params.n_x();
        let n_u = params.n_u();
        if raw.len() != 3 * n_x + 2 * n_u {
            return Err(PolicyError::DimensionMismatch(format!(
                "raw window has {} entries, policy expects {}",
                raw.len(),
                3 * n_x + 2 * n_u
            )));
        }
        let mut values = Vec::with_capacity(raw.len());
        for back in 0..3 {
            for i in 0..n_x {
                values.push(raw[back * n_x + i] / params.state_scales[i]);
            }
        }
        for back in 0..2 {
            for i in 0..n_u {
                let (lb, ub) = params.bounds[i];
                values.push((raw[3 * n_x + back * n_u + i] - lb) / (ub - lb) - 0.5);
            }
        }
        Ok(Self { values })
    }
}

/// Mean and diagonal standard deviation emitted by the policy network.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// A sampled action: the raw Gaussian draw scores the log-density, the
/// clamped value is what the plant receives.
#[derive(Debug, Clone)]
pub struct GaussianAction {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub raw: Vec<f64>,
    pub actuated: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn leaky_relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

fn leaky_relu_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

struct ForwardTrace {
    /// Activations entering each layer: input window, then each hidden
    /// output (length hidden.len() + 1).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
    mean_pre: Vec<f64>,
    std_pre: Vec<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

fn forward_trace(params: &PolicyParameters, window: &PolicyWindow) -> ForwardTrace {
    let mut inputs = Vec::with_capacity(params.hidden.len() + 1);
    let mut pre = Vec::with_capacity(params.hidden.len());
    inputs.push(window.values.clone());
    for layer in &params.hidden {
        let z = layer.affine(inputs.last().expect("non-empty"));
        let h = z.iter().map(|&v| leaky_relu(v)).collect();
        pre.push(z);
        inputs.push(h);
    }
    let top = inputs.last().expect("non-empty");
    let mean_pre = params.mean_head.affine(top);
    let std_pre = params.std_head.affine(top);
    let mean: Vec<f64> = mean_pre
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let (lb, ub) = params.bounds[i];
            lb + (ub - lb) * sigmoid(z)
        })
        .collect();
    let std: Vec<f64> = std_pre
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let lo = params.sigma_min(i);
            (lo + (params.sigma_max(i) - lo) * sigmoid(z)).max(SIGMA_FLOOR)
        })
        .collect();
    ForwardTrace {
        inputs,
        pre,
        mean_pre,
        std_pre,
        mean,
        std,
    }
}

/// Deterministic forward pass: bounded mean and positive diagonal std.
pub fn forward(
    params: &PolicyParameters,
    window: &PolicyWindow,
) -> Result<ActionDistribution, PolicyError> {
    params.check_window(window)?;
    let trace = forward_trace(params, window);
    Ok(ActionDistribution {
        mean: trace.mean,
        std: trace.std,
    })
}

/// Samples `raw ~ N(mean, diag(std^2))` and clamps it into the control box.
pub fn sample_action(
    params: &PolicyParameters,
    window: &PolicyWindow,
    rng: &mut ChaCha8Rng,
) -> Result<GaussianAction, PolicyError> {
    let dist = forward(params, window)?;
    let raw: Vec<f64> = dist
        .mean
        .iter()
        .zip(&dist.std)
        .map(|(&m, &s)| Normal::new(m, s).expect("positive std").sample(rng))
        .collect();
    let actuated: Vec<f64> = raw
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (lb, ub) = params.bounds[i];
            v.clamp(lb, ub)
        })
        .collect();
    Ok(GaussianAction {
        mean: dist.mean,
        std: dist.std,
        raw,
        actuated,
    })
}

/// Diagonal-Gaussian log-density of the raw (pre-clamp) sample.
pub fn log_prob(
    params: &PolicyParameters,
    window: &PolicyWindow,
    raw_sample: &[f64],
) -> Result<f64, PolicyError> {
    params.check_window(window)?;
    if raw_sample.len() != params.n_u() {
        return Err(PolicyError::DimensionMismatch(format!(
            "sample has {} entries, policy emits {}",
            raw_sample.len(),
            params.n_u()
        )));
    }
    let trace = forward_trace(params, window);
    Ok(log_prob_from(&trace.mean, &trace.std, raw_sample))
}

fn log_prob_from(mean: &[f64], std: &[f64], raw: &[f64]) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    raw.iter()
        .zip(mean.iter().zip(std))
        .map(|(&u, (&m, &s))| {
            let z = (u - m) / s;
            -0.5 * (z * z + ln_2pi) - s.ln()
        })
        .sum()
}

/// Reverse-mode pass shared by the score gradient and the supervised fit:
/// `d_mean_pre` / `d_std_pre` seed the two heads.
fn backprop(
    params: &PolicyParameters,
    trace: &ForwardTrace,
    d_mean_pre: &[f64],
    d_std_pre: &[f64],
) -> Vec<f64> {
    let n_layers = params.hidden.len();
    let top = &trace.inputs[n_layers];

    let mut grad = vec![0.0; params.param_count()];
    // Offsets of each layer's block in the flat layout.
    let mut offsets = Vec::with_capacity(n_layers + 2);
    let mut at = 0;
    for layer in params.hidden.iter().chain([&params.mean_head, &params.std_head]) {
        offsets.push(at);
        at += layer.param_count();
    }

    // Heads: weight gradient is outer(seed, top activation); bias gradient
    // is the seed itself. Accumulate the pullback into d_top.
    let mut d_top = vec![0.0; top.len()];
    for (head_idx, (head, seed)) in [(&params.mean_head, d_mean_pre), (&params.std_head, d_std_pre)]
        .into_iter()
        .enumerate()
    {
        let base = offsets[n_layers + head_idx];
        for r in 0..head.out_dim {
            let row = base + r * head.in_dim;
            for c in 0..head.in_dim {
                grad[row + c] = seed[r] * top[c];
            }
            grad[base + head.out_dim * head.in_dim + r] = seed[r];
            for c in 0..head.in_dim {
                d_top[c] += head.weights[r * head.in_dim + c] * seed[r];
            }
        }
    }

    // Hidden stack, walked backwards.
    let mut d_h = d_top;
    for l in (0..n_layers).rev() {
        let layer = &params.hidden[l];
        let input = &trace.inputs[l];
        let z = &trace.pre[l];
        let dz: Vec<f64> = d_h
            .iter()
            .zip(z)
            .map(|(&dh, &zv)| dh * leaky_relu_grad(zv))
            .collect();
        let base = offsets[l];
        for r in 0..layer.out_dim {
            let row = base + r * layer.in_dim;
            for c in 0..layer.in_dim {
                grad[row + c] = dz[r] * input[c];
            }
            grad[base + layer.out_dim * layer.in_dim + r] = dz[r];
        }
        let mut d_prev = vec![0.0; layer.in_dim];
        for r in 0..layer.out_dim {
            let row = &layer.weights[r * layer.in_dim..(r + 1) * layer.in_dim];
            for c in 0..layer.in_dim {
                d_prev[c] += row[c] * dz[r];
            }
        }
        d_h = d_prev;
    }
    grad
}

/// Exact gradient of [`log_prob`] with respect to every parameter, in the
/// flat layout of [`PolicyParameters::flatten`].
pub fn grad_log_prob(
    params: &PolicyParameters,
    window: &PolicyWindow,
    raw_sample: &[f64],
) -> Result<Vec<f64>, PolicyError> {
    params.check_window(window)?;
    if raw_sample.len() != params.n_u() {
        return Err(PolicyError::DimensionMismatch(format!(
            "sample has {} entries, policy emits {}",
            raw_sample.len(),
            params.n_u()
        )));
    }
    let trace = forward_trace(params, window);

    let n_u = params.n_u();
    let mut d_mean_pre = vec![0.0; n_u];
    let mut d_std_pre = vec![0.0; n_u];
    for i in 0..n_u {
        let (lb, ub) = params.bounds[i];
        let range = ub - lb;
        let m = trace.mean[i];
        let s = trace.std[i];
        let resid = raw_sample[i] - m;

        let d_logp_d_mean = resid / (s * s);
        let d_logp_d_std = resid * resid / (s * s * s) - 1.0 / s;

        let sm = sigmoid(trace.mean_pre[i]);
        d_mean_pre[i] = d_logp_d_mean * range * sm * (1.0 - sm);

        // The hard floor is flat: no gradient flows once sigma is pinned.
        if s > SIGMA_FLOOR {
            let ss = sigmoid(trace.std_pre[i]);
            d_std_pre[i] =
                d_logp_d_std * (params.sigma_max(i) - params.sigma_min(i)) * ss * (1.0 - ss);
        }
    }
    Ok(backprop(params, &trace, &d_mean_pre, &d_std_pre))
}

/// Squared-error fit of the policy mean against a raw-unit target control,
/// leaving the std head untouched. Errors are normalized per dimension by
/// the control range so both controls weigh equally. Returns (loss, grad).
pub fn mean_mse_grad(
    params: &PolicyParameters,
    window: &PolicyWindow,
    target: &[f64],
) -> Result<(f64, Vec<f64>), PolicyError> {
    params.check_window(window)?;
    if target.len() != params.n_u() {
        return Err(PolicyError::DimensionMismatch(format!(
            "target has {} entries, policy emits {}",
            target.len(),
            params.n_u()
        )));
    }
    for (i, &t) in target.iter().enumerate() {
        let (lb, ub) = params.bounds[i];
        if t < lb || t > ub {
            return Err(PolicyError::TargetOutOfBounds(format!(
                "control {i} target {t} outside [{lb}, {ub}]"
            )));
        }
    }
    let trace = forward_trace(params, window);
    let n_u = params.n_u();
    let mut loss = 0.0;
    let mut d_mean_pre = vec![0.0; n_u];
    let d_std_pre = vec![0.0; n_u];
    for i in 0..n_u {
        let (lb, ub) = params.bounds[i];
        let range = ub - lb;
        let err = (trace.mean[i] - target[i]) / range;
        loss += err * err / n_u as f64;
        let d_loss_d_mean = 2.0 * err / (range * n_u as f64);
        let sm = sigmoid(trace.mean_pre[i]);
        d_mean_pre[i] = d_loss_d_mean * range * sm * (1.0 - sm);
    }
    Ok((loss, backprop(params, &trace, &d_mean_pre, &d_std_pre)))
}
