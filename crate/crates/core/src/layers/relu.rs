use super::{MomentGrad, MomentVector};
use crate::gaussian::{inverse_mills, normal_cdf, normal_pdf};

/// Moments of `max(0, a)` for Gaussian `a` (rectified Gaussian).
///
/// With `alpha = m / sqrt(v)`, `gamma = phi(alpha) / Phi(alpha)` and
/// `v' = m + sqrt(v) gamma`:
///
/// ```text
/// mean = Phi(alpha) v'
/// var  = mean Phi(-alpha) v' + Phi(alpha) v (1 - gamma (gamma + alpha))
/// ```
///
/// Zero-variance entries are deterministic and pass through `max(0, m)`.
pub fn relu_moments(a: &MomentVector) -> MomentVector {
    let mut out = MomentVector::with_capacity(a.len());
    for (&m, &v) in a.means.iter().zip(&a.variances) {
        let (mean, var) = relu_one(m, v);
        out.push(mean, var);
    }
    out
}

fn relu_one(m: f64, v: f64) -> (f64, f64) {
    if v <= 0.0 {
        return (m.max(0.0), 0.0);
    }
    let sd = v.sqrt();
    let alpha = m / sd;
    let gamma = inverse_mills(alpha);
    let v_prime = m + sd * gamma;
    let cdf = normal_cdf(alpha);
    let mean = (cdf * v_prime).max(0.0);
    let var = mean * normal_cdf(-alpha) * v_prime + cdf * v * (1.0 - gamma * (gamma + alpha));
    (mean, var.max(0.0))
}

/// Reverse pass through [`relu_moments`].
///
/// Uses the closed-form derivatives of the rectified moments:
/// `dmean/dm = Phi`, `dmean/dv = phi / (2 sd)`, `dvar/dm = 2 mean Phi(-alpha)`,
/// `dvar/dv = Phi - mean phi / sd`.
pub(crate) fn relu_backward(a: &MomentVector, grad: &MomentGrad) -> MomentGrad {
    let mut out = MomentGrad::zeros(a.len());
    for i in 0..a.len() {
        let (m, v) = a.get(i);
        let (gm, gv) = (grad.means[i], grad.variances[i]);
        if v <= 0.0 {
            let open = if m > 0.0 { 1.0 } else { 0.0 };
            out.means[i] = gm * open;
            out.variances[i] = gv * open;
            continue;
        }
        let sd = v.sqrt();
        let alpha = m / sd;
        let cdf = normal_cdf(alpha);
        let pdf = normal_pdf(alpha);
        let mean = relu_one(m, v).0;
        let d_mean_dm = cdf;
        let d_mean_dv = pdf / (2.0 * sd);
        let d_var_dm = 2.0 * mean * normal_cdf(-alpha);
        let d_var_dv = cdf - mean * pdf / sd;
        out.means[i] = gm * d_mean_dm + gv * d_var_dm;
        out.variances[i] = gm * d_mean_dv + gv * d_var_dv;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_input() {
        let out = relu_moments(&MomentVector::new(vec![0.0], vec![1.0]).unwrap());
        let phi0 = 0.398_942_280_401_432_7;
        assert!((out.means[0] - phi0).abs() < 1e-4);
        assert!((out.variances[0] - (0.5 - phi0 * phi0)).abs() < 1e-4);
    }

    #[test]
    fn asymptotic_regions() {
        let out = relu_moments(&MomentVector::new(vec![10.0, -10.0], vec![1e-6, 1e-6]).unwrap());
        assert!((out.means[0] - 10.0).abs() < 1e-9);
        assert!((out.variances[0] - 1e-6).abs() < 1e-12);
        assert!(out.means[1].abs() < 1e-12);
        assert!(out.variances[1].abs() < 1e-12);
    }

    #[test]
    fn deterministic_passthrough() {
        let out = relu_moments(&MomentVector::deterministic(vec![2.0, -3.0]));
        assert_eq!(out.means, vec![2.0, 0.0]);
        assert_eq!(out.variances, vec![0.0, 0.0]);
    }

    #[test]
    fn outputs_nonnegative_over_a_grid() {
        for i in -200..=200 {
            let m = i as f64 * 0.25;
            for &v in &[1e-8, 1e-3, 0.5, 4.0, 100.0] {
                let (mean, var) = relu_one(m, v);
                assert!(mean >= 0.0 && var >= 0.0 && mean.is_finite() && var.is_finite());
            }
        }
    }

    #[test]
    fn closed_form_matches_second_moment() {
        // E[max(0,a)^2] = (m^2 + v) Phi(alpha) + m sd phi(alpha)
        for &(m, v) in &[(0.3, 0.8), (-1.2, 2.0), (2.5, 0.1)] {
            let (mean, var) = relu_one(m, v);
            let sd = f64::sqrt(v);
            let a = m / sd;
            let second = (m * m + v) * normal_cdf(a) + m * sd * normal_pdf(a);
            assert!((var + mean * mean - second).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let h = 1e-6;
        for &(m, v) in &[(0.3, 0.8), (-1.2, 2.0), (2.5, 0.1), (-4.0, 0.5), (0.0, 1e-3)] {
            let a = MomentVector::new(vec![m], vec![v]).unwrap();
            for &(gm, gv) in &[(1.0, 0.0), (0.0, 1.0)] {
                let g = MomentGrad { means: vec![gm], variances: vec![gv] };
                let analytic = relu_backward(&a, &g);
                let f = |m: f64, v: f64| {
                    let (mean, var) = relu_one(m, v);
                    gm * mean + gv * var
                };
                let dm = (f(m + h, v) - f(m - h, v)) / (2.0 * h);
                let dv = (f(m, v + h) - f(m, v - h)) / (2.0 * h);
                assert!((analytic.means[0] - dm).abs() < 1e-6, "m={m} v={v}");
                assert!((analytic.variances[0] - dv).abs() < 1e-6 * dv.abs().max(1.0), "m={m} v={v}");
            }
        }
    }
}
