//! Scalar Gaussian beliefs, probit special functions and the ADF update.
//!
//! Every weight in a model is an independent Gaussian. Training moves a
//! weight's `(mean, variance)` with [`adf_update`]; the parameter server
//! moves it by adding natural parameters ([`natural_multiply`]).

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_1_SQRT_2;
use thiserror::Error;

/// 1 / sqrt(2 pi)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
/// 0.5 * ln(2 pi)
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
/// Below this argument the inverse Mills ratio switches to a continued fraction.
const MILLS_TAIL: f64 = -30.0;
/// Below this argument `log_normal_cdf` works from the inverse Mills ratio.
const LOG_CDF_TAIL: f64 = -5.0;
const LARGEST_BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GaussianError {
    #[error("invalid gaussian: mean {mean}, variance {variance}")]
    InvalidGaussian { mean: f64, variance: f64 },
    #[error("improper gaussian: precision {precision} is not positive")]
    ImproperGaussian { precision: f64 },
}

/// An ADF step whose posterior variance left the admissible range. The
/// caller keeps the prior.
#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("degenerate update: variance would become {variance}")]
pub struct DegenerateUpdate {
    pub variance: f64,
}

/// Admissible variance range for every stored weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceBounds {
    pub floor: f64,
    pub ceiling: f64,
}

impl Default for VarianceBounds {
    fn default() -> Self {
        Self {
            floor: 1e-8,
            ceiling: 1e4,
        }
    }
}

impl VarianceBounds {
    pub fn is_valid(&self) -> bool {
        self.floor.is_finite()
            && self.ceiling.is_finite()
            && self.floor > 0.0
            && self.floor < self.ceiling
    }

    pub fn contains(&self, variance: f64) -> bool {
        variance >= self.floor && variance <= self.ceiling
    }
}

/// A proper univariate Gaussian belief.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    mean: f64,
    variance: f64,
}

impl Gaussian {
    pub fn new(mean: f64, variance: f64) -> Result<Self, GaussianError> {
        if mean.is_finite() && variance.is_finite() && variance > 0.0 {
            Ok(Self { mean, variance })
        } else {
            Err(GaussianError::InvalidGaussian { mean, variance })
        }
    }

    pub(crate) fn new_unchecked(mean: f64, variance: f64) -> Self {
        debug_assert!(mean.is_finite() && variance.is_finite() && variance > 0.0);
        Self { mean, variance }
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn to_natural(&self) -> NaturalGaussian {
        NaturalGaussian {
            precision: 1.0 / self.variance,
            precision_mean: self.mean / self.variance,
        }
    }

    pub fn from_natural(natural: NaturalGaussian) -> Result<Self, GaussianError> {
        if !(natural.precision > 0.0) || !natural.precision.is_finite() {
            return Err(GaussianError::ImproperGaussian {
                precision: natural.precision,
            });
        }
        let variance = 1.0 / natural.precision;
        Self::new(natural.precision_mean * variance, variance)
    }

    /// Returns a copy with the variance replaced.
    pub fn with_variance(&self, variance: f64) -> Result<Self, GaussianError> {
        Self::new(self.mean, variance)
    }
}

/// Natural parameters `(1/v, m/v)`. A ratio of Gaussians, so the precision
/// may be zero or negative.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NaturalGaussian {
    pub precision: f64,
    pub precision_mean: f64,
}

impl NaturalGaussian {
    pub const ZERO: Self = Self {
        precision: 0.0,
        precision_mean: 0.0,
    };

    pub fn is_finite(&self) -> bool {
        self.precision.is_finite() && self.precision_mean.is_finite()
    }

    pub fn is_zero(&self) -> bool {
        self.precision == 0.0 && self.precision_mean == 0.0
    }
}

impl std::ops::Add for NaturalGaussian {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            precision: self.precision + rhs.precision,
            precision_mean: self.precision_mean + rhs.precision_mean,
        }
    }
}

impl std::ops::AddAssign for NaturalGaussian {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

/// Partial derivatives of `log Z` with respect to a weight's mean and variance.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AdfGradient {
    pub d_mean: f64,
    pub d_variance: f64,
}

impl AdfGradient {
    pub fn new(d_mean: f64, d_variance: f64) -> Self {
        Self { d_mean, d_variance }
    }

    pub fn is_finite(&self) -> bool {
        self.d_mean.is_finite() && self.d_variance.is_finite()
    }
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF.
///
/// Clamped into the open interval `(0, 1)`: the upper end saturates at the
/// largest double below one.
pub fn normal_cdf(x: f64) -> f64 {
    let p = 0.5 * libm::erfc(-x * FRAC_1_SQRT_2);
    p.clamp(f64::MIN_POSITIVE, LARGEST_BELOW_ONE)
}

/// `ln Phi(x)`, finite for every finite `x`.
pub fn log_normal_cdf(x: f64) -> f64 {
    if x >= LOG_CDF_TAIL {
        (0.5 * libm::erfc(-x * FRAC_1_SQRT_2)).ln()
    } else {
        // Phi(x) = phi(x) / gamma(x)
        -0.5 * x * x - HALF_LN_2PI - inverse_mills(x).ln()
    }
}

/// `phi(alpha) / Phi(alpha)`, the inverse Mills ratio.
///
/// Uses the ratio of densities directly while both terms are comfortably
/// representable and a continued fraction for the Mills ratio beyond that.
pub fn inverse_mills(alpha: f64) -> f64 {
    if alpha >= MILLS_TAIL {
        let cdf = 0.5 * libm::erfc(-alpha * FRAC_1_SQRT_2);
        return normal_pdf(alpha) / cdf;
    }
    // Mills ratio R(t) = 1/(t+ 1/(t+ 2/(t+ 3/(t+ ...)))), gamma = 1/R(-alpha).
    let t = -alpha;
    let mut tail = t;
    for n in (1..=64).rev() {
        tail = t + n as f64 / tail;
    }
    tail
}

/// One assumed-density-filtering step:
/// `m' = m + v dm`, `v' = v - v^2 (dm^2 - 2 dv)`.
pub fn adf_update(
    prior: Gaussian,
    grad: AdfGradient,
    bounds: VarianceBounds,
) -> Result<Gaussian, DegenerateUpdate> {
    let v = prior.variance;
    let mean = prior.mean + v * grad.d_mean;
    let variance = v - v * v * (grad.d_mean * grad.d_mean - 2.0 * grad.d_variance);
    if !mean.is_finite() || !variance.is_finite() || !bounds.contains(variance) {
        return Err(DegenerateUpdate { variance });
    }
    Ok(Gaussian::new_unchecked(mean, variance))
}

/// The message `posterior / prior` in natural parameters.
pub fn natural_divide(posterior: Gaussian, prior: Gaussian) -> NaturalGaussian {
    let post = posterior.to_natural();
    let base = prior.to_natural();
    NaturalGaussian {
        precision: post.precision - base.precision,
        precision_mean: post.precision_mean - base.precision_mean,
    }
}

/// Result of folding a message into a belief.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merged {
    pub gaussian: Gaussian,
    /// The variance left the admissible range and was clamped.
    pub clamped: bool,
}

/// `base * message`: adds natural parameters, clamping the variance into
/// `bounds` with the mean recomputed from the precision-mean.
pub fn natural_multiply(base: Gaussian, msg: NaturalGaussian, bounds: VarianceBounds) -> Merged {
    let combined = base.to_natural() + msg;
    let precision = combined.precision;
    let (variance, clamped) = if !(precision > 1.0 / bounds.ceiling) {
        (bounds.ceiling, true)
    } else if 1.0 / precision < bounds.floor {
        (bounds.floor, true)
    } else {
        (1.0 / precision, false)
    };
    let mean = combined.precision_mean * variance;
    if !mean.is_finite() {
        return Merged {
            gaussian: base,
            clamped: true,
        };
    }
    Merged {
        gaussian: Gaussian::new_unchecked(mean, variance),
        clamped,
    }
}

/// Relaxes a variance toward the prior variance:
/// `v' = v v0 / ((1 - eps) v0 + eps v)`.
pub fn weight_decay(v: f64, v_prior: f64, eps: f64) -> f64 {
    if v == v_prior || eps == 0.0 {
        return v;
    }
    let out = v * v_prior / ((1.0 - eps) * v_prior + eps * v);
    // rounding must not overshoot the prior
    if v < v_prior {
        out.clamp(v, v_prior)
    } else {
        out.clamp(v_prior, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Mills-ratio asymptotic series, independent of `inverse_mills`.
    fn inverse_mills_series(alpha: f64) -> f64 {
        let t = -alpha;
        let inv_t2 = 1.0 / (t * t);
        let mut term = 1.0;
        let mut sum = 1.0;
        for n in 1..12 {
            term *= -((2 * n - 1) as f64) * inv_t2;
            sum += term;
        }
        t / sum
    }

    #[test]
    fn cdf_reference_values() {
        assert_eq!(normal_cdf(0.0), 0.5);
        assert!((normal_cdf(1.959964) - 0.975).abs() < 1e-6);
        for &x in &[0.1, 0.7, 1.3, 2.9, 5.0, 7.9] {
            assert!((normal_cdf(x) + normal_cdf(-x) - 1.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn cdf_open_interval_and_monotone() {
        let mut prev = 0.0;
        let mut x = -37.0;
        while x <= 37.0 {
            let p = normal_cdf(x);
            assert!(p > 0.0 && p < 1.0, "x={x} p={p}");
            assert!(p >= prev);
            prev = p;
            x += 0.01;
        }
    }

    #[test]
    fn pdf_reference_values() {
        assert!((normal_pdf(0.0) - 0.3989422804).abs() < 1e-9);
        let oracle = (-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((normal_pdf(1.0) - oracle).abs() < 1e-15);
        assert!((normal_pdf(1.0) - 0.2419707245).abs() < 1e-9);
        assert_eq!(normal_pdf(-2.3), normal_pdf(2.3));
    }

    #[test]
    fn inverse_mills_reference_values() {
        assert!((inverse_mills(0.0) - 0.7978845608).abs() < 1e-9);
        assert!((inverse_mills(-30.0) - 30.0333).abs() < 1e-3);
        assert!((inverse_mills(5.0) - 1.4867e-6).abs() < 1e-10);
    }

    #[test]
    fn inverse_mills_identity_and_tail() {
        let mut a = -8.0;
        while a <= 8.0 {
            let lhs = inverse_mills(a) * normal_cdf(a);
            let rhs = normal_pdf(a);
            assert!(((lhs - rhs) / rhs).abs() < 1e-10, "alpha={a}");
            a += 0.05;
        }
        for &a in &[-8.5, -10.0, -20.0, -29.9, -30.1, -37.0, -100.0, -1e4] {
            let series = inverse_mills_series(a);
            assert!(((inverse_mills(a) - series) / series).abs() < 1e-6, "alpha={a}");
        }
    }

    #[test]
    fn inverse_mills_strictly_decreasing() {
        let mut prev = f64::INFINITY;
        let mut a = -60.0;
        while a <= 8.0 {
            let g = inverse_mills(a);
            assert!(g > 0.0 && g < prev, "alpha={a}");
            prev = g;
            a += 0.01;
        }
    }

    #[test]
    fn log_cdf_matches_direct_and_stays_finite() {
        for &x in &[-4.9, -1.0, 0.0, 2.0, 6.0] {
            assert!((log_normal_cdf(x) - normal_cdf(x).ln()).abs() < 1e-12);
        }
        for &x in &[-5.0, -5.1, -12.0, -30.0] {
            let rel = (log_normal_cdf(x) - normal_cdf(x).ln()) / normal_cdf(x).ln();
            assert!(rel.abs() < 1e-12, "x={x}");
        }
        assert!(log_normal_cdf(-37.0).is_finite());
        assert!(log_normal_cdf(-1e3).is_finite());
        assert!(log_normal_cdf(-1e3) < log_normal_cdf(-37.0));
    }

    #[test]
    fn zero_gradient_is_noop() {
        let prior = Gaussian::new(0.0, 1.0).unwrap();
        let post = adf_update(prior, AdfGradient::default(), VarianceBounds::default()).unwrap();
        assert_eq!(post, prior);
    }

    #[test]
    fn collapsing_update_is_rejected() {
        let prior = Gaussian::new(0.0, 1.0).unwrap();
        let err = adf_update(prior, AdfGradient::new(2.0, 0.0), VarianceBounds::default());
        assert!(err.is_err());
    }

    #[test]
    fn natural_definitions() {
        let n = Gaussian::new(0.0, 1.0).unwrap().to_natural();
        assert_eq!((n.precision, n.precision_mean), (1.0, 0.0));
        let n = Gaussian::new(2.0, 0.5).unwrap().to_natural();
        assert_eq!((n.precision, n.precision_mean), (2.0, 4.0));
        assert!(matches!(
            Gaussian::from_natural(NaturalGaussian::ZERO),
            Err(GaussianError::ImproperGaussian { .. })
        ));
        assert!(Gaussian::from_natural(NaturalGaussian { precision: -1.0, precision_mean: 0.0 }).is_err());
    }

    #[test]
    fn divide_and_multiply_examples() {
        let p = Gaussian::new(0.3, 0.2).unwrap();
        assert!(natural_divide(p, p).is_zero());
        let d = natural_divide(Gaussian::new(0.0, 0.5).unwrap(), Gaussian::new(0.0, 1.0).unwrap());
        assert_eq!((d.precision, d.precision_mean), (1.0, 0.0));

        let base = Gaussian::new(0.0, 1.0).unwrap();
        let b = VarianceBounds::default();
        assert_eq!(natural_multiply(base, NaturalGaussian::ZERO, b).gaussian, base);
        let m = natural_multiply(base, NaturalGaussian { precision: 1.0, precision_mean: 1.0 }, b);
        assert_eq!((m.gaussian.mean(), m.gaussian.variance()), (0.5, 0.5));
        assert!(!m.clamped);
    }

    #[test]
    fn multiply_clamps_both_ends() {
        let b = VarianceBounds::default();
        let base = Gaussian::new(1.0, 1.0).unwrap();
        let wide = natural_multiply(base, NaturalGaussian { precision: -1.0, precision_mean: -0.5 }, b);
        assert!(wide.clamped);
        assert_eq!(wide.gaussian.variance(), b.ceiling);
        assert_eq!(wide.gaussian.mean(), 0.5 * b.ceiling);
        let narrow = natural_multiply(base, NaturalGaussian { precision: 1e12, precision_mean: 0.0 }, b);
        assert!(narrow.clamped);
        assert_eq!(narrow.gaussian.variance(), b.floor);
    }

    #[test]
    fn decay_examples() {
        assert_eq!(weight_decay(0.01, 0.01, 0.3), 0.01);
        assert_eq!(weight_decay(0.004, 0.01, 0.0), 0.004);
        let expected = 0.01 * 0.001 / (0.5 * 0.01 + 0.5 * 0.001);
        assert!((weight_decay(0.001, 0.01, 0.5) - expected).abs() < 1e-18);
        assert!((weight_decay(0.001, 0.01, 0.5) - 1.8182e-3).abs() < 1e-7);
    }

    fn gaussian() -> impl Strategy<Value = Gaussian> {
        (-5.0f64..5.0, 1e-4f64..10.0).prop_map(|(m, v)| Gaussian::new(m, v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn natural_round_trip(g in gaussian()) {
            let back = Gaussian::from_natural(g.to_natural()).unwrap();
            prop_assert!((back.mean() - g.mean()).abs() <= 1e-12 * g.mean().abs().max(1e-300));
            prop_assert!((back.variance() - g.variance()).abs() <= 1e-12 * g.variance());
        }

        #[test]
        fn divide_then_multiply_recovers_posterior(post in gaussian(), prior in gaussian()) {
            let msg = natural_divide(post, prior);
            let bounds = VarianceBounds { floor: 1e-12, ceiling: 1e6 };
            let back = natural_multiply(prior, msg, bounds);
            prop_assert!(!back.clamped);
            let scale = post.mean().abs().max(post.variance().sqrt());
            prop_assert!((back.gaussian.mean() - post.mean()).abs() <= 1e-10 * scale);
            prop_assert!((back.gaussian.variance() - post.variance()).abs() <= 1e-10 * post.variance());
        }

        #[test]
        fn multiply_commutes(base in gaussian(), a in gaussian(), b in gaussian()) {
            let bounds = VarianceBounds { floor: 1e-12, ceiling: 1e6 };
            let ma = a.to_natural();
            let mb = b.to_natural();
            let ab = natural_multiply(natural_multiply(base, ma, bounds).gaussian, mb, bounds).gaussian;
            let ba = natural_multiply(natural_multiply(base, mb, bounds).gaussian, ma, bounds).gaussian;
            prop_assert!((ab.mean() - ba.mean()).abs() <= 1e-12 * ab.mean().abs().max(1.0));
            prop_assert!((ab.variance() - ba.variance()).abs() <= 1e-12 * ab.variance());
        }

        #[test]
        fn shrinking_update_never_grows_variance(gm in -50.0f64..50.0, gv in -50.0f64..50.0) {
            let prior = Gaussian::new(0.0, 0.01).unwrap();
            if let Ok(post) = adf_update(prior, AdfGradient::new(gm, gv), VarianceBounds::default()) {
                if gm * gm >= 2.0 * gv {
                    prop_assert!(post.variance() <= 0.01);
                }
            }
        }

        #[test]
        fn decay_stays_between(v in 1e-8f64..1.0, v0 in 1e-4f64..1.0, eps in 0.001f64..0.999) {
            prop_assume!((v - v0).abs() > 1e-9 * v0);
            let d = weight_decay(v, v0, eps);
            prop_assert!(d > v.min(v0) && d < v.max(v0));
        }

        #[test]
        fn decay_monotone_in_v(v in 1e-6f64..1.0, dv in 1e-6f64..1.0, eps in 0.0f64..1.0) {
            prop_assert!(weight_decay(v + dv, 0.01, eps) >= weight_decay(v, 0.01, eps));
        }
    }
}
