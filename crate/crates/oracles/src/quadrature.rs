use bodl::{Gaussian, Label};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraturePosterior {
    pub mean: f64,
    pub variance: f64,
    /// Evidence `integral Phi(y t) N(t; m, v) dt`.
    pub z: f64,
}

fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn density(t: f64, m: f64, v: f64) -> f64 {
    (-(t - m) * (t - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
}

/// Composite Simpson on `[a, b]`, doubling the panel count until two
/// successive estimates agree to `tol` relative to the scale `|Q| + tiny`.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    let eval = |n: usize| {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let mut n = 256;
    let mut prev = eval(n);
    loop {
        n *= 2;
        let next = eval(n);
        if (next - prev).abs() <= tol * (next.abs() + 1e-300) || n >= 1 << 22 {
            return next;
        }
        prev = next;
    }
}

/// Exact (to quadrature accuracy) posterior of a single weight `t` with
/// prior `N(m, v)` after observing `y` under `P(y | t) = Phi(y t)`.
pub fn quadrature_probit_posterior(prior: Gaussian, y: Label) -> QuadraturePosterior {
    let (m, v) = (prior.mean(), prior.variance());
    let s = y.sign();
    let sd = v.sqrt();
    let (a, b) = (m - 10.0 * sd, m + 10.0 * sd);
    let tol = 1e-13;
    let lik = |t: f64| phi(s * t) * density(t, m, v);
    let z = simpson(lik, a, b, tol);
    let first = simpson(|t| (t - m) * lik(t), a, b, tol) / z;
    let mean = m + first;
    let variance = simpson(|t| (t - mean) * (t - mean) * lik(t), a, b, tol) / z;
    QuadraturePosterior { mean, variance, z }
}
