//! Empirical-CDF machinery and beta-distribution confidence bounds.
//!
//! The joint chance constraint is certified from Monte Carlo samples: the
//! fraction of trajectories satisfying every constraint at every timestep is
//! a binomial proportion, and its one-sided confidence lower bound is
//! obtained from the inverse beta CDF. Everything here is dependency-free so
//! it can be verified directly against closed forms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("no samples")]
    EmptySamples,
    #[error("sample value is not finite")]
    NonFiniteSample,
    #[error("invalid shape: beta parameters must be positive, got a={a}, b={b}")]
    InvalidShape { a: f64, b: f64 },
    #[error("probability {0} outside valid range")]
    InvalidProbability(f64),
    #[error("satisfaction count {count} is not an integer multiple of 1/{samples}")]
    FractionalCount { count: f64, samples: usize },
}

/// Empirical joint-satisfaction frequency together with its one-sided
/// confidence lower bound.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SatisfactionEstimate {
    /// Fraction of sampled trajectories that satisfied every constraint.
    pub f_hat: f64,
    /// Number of Monte Carlo trajectories behind `f_hat`.
    pub sample_count: usize,
    /// Lower confidence bound on the true satisfaction probability.
    pub f_lb: f64,
    /// One minus the confidence level of `f_lb`.
    pub epsilon: f64,
}

impl SatisfactionEstimate {
    /// Builds the estimate from indicator flags, computing the lower bound.
    pub fn from_indicators(flags: &[bool], epsilon: f64) -> Result<Self, StatsError> {
        let f_hat = ecdf_joint_satisfaction(flags)?;
        let f_lb = f_lower_bound(f_hat, flags.len(), epsilon)?;
        Ok(Self {
            f_hat,
            sample_count: flags.len(),
            f_lb,
            epsilon,
        })
    }
}

/// Non-empty collection of scalar samples of a single constraint value.
#[derive(Debug, Clone)]
pub struct SampleSet {
    values: Vec<f64>,
}

impl SampleSet {
    pub fn new(values: Vec<f64>) -> Result<Self, StatsError> {
        if values.is_empty() {
            return Err(StatsError::EmptySamples);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFiniteSample);
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false // enforced non-empty at construction
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Fraction of trajectories whose joint indicator is true.
pub fn ecdf_joint_satisfaction(indicator_flags: &[bool]) -> Result<f64, StatsError> {
    if indicator_flags.is_empty() {
        return Err(StatsError::EmptySamples);
    }
    let hits = indicator_flags.iter().filter(|&&f| f).count();
    Ok(hits as f64 / indicator_flags.len() as f64)
}

/// Smallest sample value `q` whose empirical CDF reaches `level`.
///
/// The ecdf is the right-continuous step function of the sorted samples, so
/// the returned value is always an element of the sample set.
pub fn empirical_quantile(samples: &SampleSet, level: f64) -> Result<f64, StatsError> {
    if !(level > 0.0 && level <= 1.0) {
        return Err(StatsError::InvalidProbability(level));
    }
    let mut sorted = samples.values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let n = sorted.len();
    for (i, &v) in sorted.iter().enumerate() {
        if (i + 1) as f64 / n as f64 >= level {
            return Ok(v);
        }
    }
    Ok(sorted[n - 1])
}

// Lanczos approximation of ln Γ(x), g = 7, 9 coefficients. Accurate to
// roughly 1e-13 absolute over the shape range used here.
const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEFFS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

fn ln_gamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    if x < 0.5 {
        // Reflection keeps the series in its accurate region.
        let pi = std::f64::consts::PI;
        pi.ln() - (pi * x).sin().ln() - ln_gamma(1.0 - x)
    } else {
        let z = x - 1.0;
        let mut acc = LANCZOS_COEFFS[0];
        for (i, &c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
            acc += c / (z + i as f64);
        }
        let t = z + LANCZOS_G + 0.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + acc.ln()
    }
}

// Continued fraction for the incomplete beta (modified Lentz).
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;

    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;

    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;

        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;

        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;

        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b), i.e. the Beta(a, b) CDF.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> Result<f64, StatsError> {
    if !(a > 0.0 && b > 0.0) {
        return Err(StatsError::InvalidShape { a, b });
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(StatsError::InvalidProbability(x));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // Symmetry switch keeps the continued fraction rapidly convergent.
    let value = if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    };
    Ok(value.clamp(0.0, 1.0))
}

/// Inverse Beta(a, b) CDF by bracketing bisection on [0, 1].
pub fn inverse_beta_cdf(p: f64, a: f64, b: f64) -> Result<f64, StatsError> {
    if !(a > 0.0 && b > 0.0) {
        return Err(StatsError::InvalidShape { a, b });
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(StatsError::InvalidProbability(p));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if p == 1.0 {
        return Ok(1.0);
    }
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    // 120 halvings take the interval far below f64 resolution; the loop
    // stops earlier once the midpoint stops moving.
    for _ in 0..120 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if regularized_incomplete_beta(mid, a, b)? < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One-sided (1 − epsilon) confidence lower bound on a binomial proportion
/// observed as `f_hat` over `sample_count` i.i.d. trials.
///
/// Zero observed successes certify nothing, so `f_hat = 0` maps to 0 instead
/// of evaluating a beta with a degenerate shape parameter.
pub fn f_lower_bound(f_hat: f64, sample_count: usize, epsilon: f64) -> Result<f64, StatsError> {
    if sample_count == 0 {
        return Err(StatsError::EmptySamples);
    }
    if !(0.0..=1.0).contains(&f_hat) {
        return Err(StatsError::InvalidProbability(f_hat));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(StatsError::InvalidProbability(epsilon));
    }
    let s = sample_count as f64;
    let count = f_hat * s;
    if (count - count.round()).abs() > 1e-6 {
        return Err(StatsError::FractionalCount {
            count,
            samples: sample_count,
        });
    }
    let count = count.round();
    if count == 0.0 {
        return Ok(0.0);
    }
    let x = inverse_beta_cdf(1.0 - epsilon, s + 1.0 - count, count)?;
    Ok(1.0 - x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(got: f64, want: f64, tol: f64) {
        assert!(
            (got - want).abs() <= tol,
            "got {got}, want {want} (tol {tol})"
        );
    }

    #[test]
    fn ecdf_counts_true_flags() {
        let got = ecdf_joint_satisfaction(&[true, true, true, false]).unwrap();
        assert_eq!(got, 0.75);

        let all = vec![true; 500];
        assert_eq!(ecdf_joint_satisfaction(&all).unwrap(), 1.0);

        let mut one_off = vec![true; 500];
        one_off[137] = false;
        assert_eq!(ecdf_joint_satisfaction(&one_off).unwrap(), 0.998);
    }

    #[test]
    fn ecdf_rejects_empty() {
        assert!(matches!(
            ecdf_joint_satisfaction(&[]),
            Err(StatsError::EmptySamples)
        ));
    }

    // Independent oracle: scan the sorted samples and take the first value
    // whose rank fraction reaches the level.
    fn quantile_oracle(values: &[f64], level: f64) -> f64 {
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len() as f64;
        let mut result = sorted[sorted.len() - 1];
        for (i, &v) in sorted.iter().enumerate().rev() {
            if (i + 1) as f64 / n >= level {
                result = v;
            } else {
                break;
            }
        }
        result
    }

    #[test]
    fn quantile_matches_sort_and_scan_oracle() {
        let s = SampleSet::new(vec![-1.0, -0.5, 0.0, 0.5]).unwrap();
        let want = quantile_oracle(s.values(), 0.75);
        assert_eq!(want, 0.0);
        assert_eq!(empirical_quantile(&s, 0.75).unwrap(), want);

        let s = SampleSet::new(vec![0.0, 0.0, 0.0, 10.0]).unwrap();
        let want = quantile_oracle(s.values(), 0.75);
        assert_eq!(want, 0.0);
        assert_eq!(empirical_quantile(&s, 0.75).unwrap(), want);
    }

    #[test]
    fn quantile_of_constant_samples_is_the_constant() {
        let s = SampleSet::new(vec![2.5; 17]).unwrap();
        for level in [0.01, 0.25, 0.5, 0.99, 1.0] {
            assert_eq!(empirical_quantile(&s, level).unwrap(), 2.5);
        }
    }

    #[test]
    fn quantile_rejects_bad_level() {
        let s = SampleSet::new(vec![1.0]).unwrap();
        assert!(empirical_quantile(&s, 0.0).is_err());
        assert!(empirical_quantile(&s, 1.5).is_err());
    }

    #[test]
    fn sample_set_rejects_empty_and_non_finite() {
        assert!(SampleSet::new(vec![]).is_err());
        assert!(SampleSet::new(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn incomplete_beta_uniform_case() {
        assert_close(regularized_incomplete_beta(0.3, 1.0, 1.0).unwrap(), 0.3, 1e-14);
    }

    #[test]
    fn incomplete_beta_symmetry_at_half() {
        for a in [0.5, 1.0, 2.0, 5.0, 50.0, 500.0] {
            assert_close(regularized_incomplete_beta(0.5, a, a).unwrap(), 0.5, 1e-12);
        }
    }

    #[test]
    fn incomplete_beta_closed_form_one_n() {
        // I_x(1, n) = 1 - (1 - x)^n
        assert_close(
            regularized_incomplete_beta(0.1, 1.0, 5.0).unwrap(),
            0.40951,
            1e-12,
        );
        for n in [1.0, 2.0, 10.0, 100.0, 500.0] {
            for x in [0.001f64, 0.01, 0.1, 0.5, 0.9] {
                let want = 1.0 - (1.0 - x).powf(n);
                assert_close(regularized_incomplete_beta(x, 1.0, n).unwrap(), want, 1e-11);
            }
        }
    }

    #[test]
    fn incomplete_beta_bounds_and_errors() {
        assert_eq!(regularized_incomplete_beta(0.0, 2.0, 3.0).unwrap(), 0.0);
        assert_eq!(regularized_incomplete_beta(1.0, 2.0, 3.0).unwrap(), 1.0);
        assert!(matches!(
            regularized_incomplete_beta(0.5, 0.0, 1.0),
            Err(StatsError::InvalidShape { .. })
        ));
        assert!(regularized_incomplete_beta(0.5, 1.0, -2.0).is_err());
    }

    #[test]
    fn inverse_beta_closed_forms() {
        assert_close(inverse_beta_cdf(0.3, 1.0, 1.0).unwrap(), 0.3, 1e-12);
        assert_close(inverse_beta_cdf(0.5, 3.0, 3.0).unwrap(), 0.5, 1e-12);
        // Beta(1, 500): x = 1 - (1 - p)^(1/500)
        assert_close(
            inverse_beta_cdf(0.99, 1.0, 500.0).unwrap(),
            0.009_168_055_107_232_398,
            1e-10,
        );
        // Beta(2, 1): x = sqrt(p)
        assert_close(inverse_beta_cdf(0.49, 2.0, 1.0).unwrap(), 0.7, 1e-11);
        assert!(inverse_beta_cdf(0.5, -1.0, 1.0).is_err());
    }

    #[test]
    fn inverse_beta_round_trip_grid() {
        let shapes = [0.5, 1.0, 2.0, 5.0, 500.0];
        for &a in &shapes {
            for &b in &shapes {
                for i in 1..100 {
                    let p = i as f64 / 100.0;
                    let x = inverse_beta_cdf(p, a, b).unwrap();
                    let back = regularized_incomplete_beta(x, a, b).unwrap();
                    assert!(
                        (back - p).abs() <= 1e-10,
                        "round trip failed: a={a} b={b} p={p} x={x} back={back}"
                    );
                }
            }
        }
    }

    #[test]
    fn lower_bound_closed_forms() {
        // All satisfied: F_lb = eps^(1/S).
        assert_close(
            f_lower_bound(1.0, 500, 0.01).unwrap(),
            0.990_831_944_892_767_6,
            1e-10,
        );
        // Single sample: Beta(1, 1) is uniform.
        assert_close(f_lower_bound(1.0, 1, 0.05).unwrap(), 0.05, 1e-12);
        // No successes certify nothing.
        assert_eq!(f_lower_bound(0.0, 500, 0.01).unwrap(), 0.0);
        assert_eq!(f_lower_bound(0.0, 3, 0.37).unwrap(), 0.0);
    }

    #[test]
    fn lower_bound_validates_inputs() {
        assert!(f_lower_bound(0.5, 0, 0.05).is_err());
        assert!(f_lower_bound(1.2, 10, 0.05).is_err());
        assert!(f_lower_bound(1.0, 10, 0.0).is_err());
        // 0.55 * 10 = 5.5 successes is not a count.
        assert!(matches!(
            f_lower_bound(0.55, 10, 0.05),
            Err(StatsError::FractionalCount { .. })
        ));
        // but 5/10 is fine
        assert!(f_lower_bound(0.5, 10, 0.05).is_ok());
    }

    #[test]
    fn lower_bound_monotone_in_f_hat_and_samples() {
        let eps = 0.05;
        for s in [10usize, 50, 200] {
            let mut prev = -1.0;
            for k in 0..=s {
                let f = k as f64 / s as f64;
                let lb = f_lower_bound(f, s, eps).unwrap();
                assert!(
                    lb >= prev - 1e-12,
                    "lb not nondecreasing in f_hat at S={s}, k={k}"
                );
                assert!(lb <= f + 1e-12, "lower bound exceeds point estimate");
                prev = lb;
            }
        }
        // Fixed f_hat, growing S tightens the bound upward.
        for f_num in [1usize, 3, 4] {
            let mut prev = -1.0;
            for mult in [1usize, 2, 5, 10, 50] {
                let s = 4 * mult;
                let f = f_num as f64 / 4.0;
                let lb = f_lower_bound(f, s, eps).unwrap();
                assert!(lb >= prev - 1e-12, "lb not nondecreasing in S");
                prev = lb;
            }
        }
    }

    #[test]
    fn lower_bound_estimate_invariants() {
        let flags: Vec<bool> = (0..200).map(|i| i % 10 != 0).collect();
        let est = SatisfactionEstimate::from_indicators(&flags, 0.01).unwrap();
        assert_eq!(est.f_hat, 0.9);
        assert_eq!(est.sample_count, 200);
        assert!(est.f_lb >= 0.0 && est.f_lb <= est.f_hat);
    }

    // Quick coverage check; the acceptance suite runs the full grid.
    #[test]
    fn coverage_of_lower_bound_smoke() {
        let true_f = 0.93;
        let eps = 0.1;
        let s = 80;
        let reps = 400;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut covered = 0usize;
        for _ in 0..reps {
            let hits = (0..s).filter(|_| rng.random::<f64>() < true_f).count();
            let lb = f_lower_bound(hits as f64 / s as f64, s, eps).unwrap();
            if true_f >= lb {
                covered += 1;
            }
        }
        let freq = covered as f64 / reps as f64;
        let slack = 3.0 * ((1.0 - eps) * eps / reps as f64).sqrt();
        assert!(
            freq >= 1.0 - eps - slack,
            "coverage {freq} below {}",
            1.0 - eps - slack
        );
    }

    proptest! {
        // The quantile is an element of the sample set and at least
        // ceil(level * n) samples sit at or below it.
        #[test]
        fn quantile_membership_and_rank(
            values in proptest::collection::vec(-1e6f64..1e6, 1..60),
            level in 0.0001f64..1.0,
        ) {
            let s = SampleSet::new(values.clone()).unwrap();
            let q = empirical_quantile(&s, level).unwrap();
            prop_assert!(values.iter().any(|&v| v == q));
            let at_or_below = values.iter().filter(|&&v| v <= q).count();
            let needed = (level * values.len() as f64).ceil() as usize;
            prop_assert!(at_or_below >= needed);
        }

        #[test]
        fn incomplete_beta_monotone_in_x(
            a in 0.2f64..50.0,
            b in 0.2f64..50.0,
            x1 in 0.0f64..1.0,
            x2 in 0.0f64..1.0,
        ) {
            let (lo, hi) = if x1 <= x2 { (x1, x2) } else { (x2, x1) };
            let f_lo = regularized_incomplete_beta(lo, a, b).unwrap();
            let f_hi = regularized_incomplete_beta(hi, a, b).unwrap();
            prop_assert!(f_lo <= f_hi + 1e-12);
        }
    }
}
