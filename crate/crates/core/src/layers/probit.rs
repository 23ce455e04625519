use super::{LayerError, MomentVector};
use crate::data::Label;
use crate::gaussian::{inverse_mills, log_normal_cdf, AdfGradient};

fn scalar(z_l: &MomentVector) -> Result<(f64, f64), LayerError> {
    if z_l.len() != 1 {
        return Err(LayerError::ShapeMismatch(format!(
            "probit output expects one activation, got {}",
            z_l.len()
        )));
    }
    Ok(z_l.get(0))
}

/// `log Phi(y m / sqrt(v + 1))`, the log evidence of one label.
pub fn probit_log_z(y: Label, z_l: &MomentVector) -> Result<f64, LayerError> {
    let (m, v) = scalar(z_l)?;
    Ok(log_normal_cdf(y.sign() * m / (v + 1.0).sqrt()))
}

/// Derivatives of [`probit_log_z`] with respect to the output mean and variance.
pub fn probit_gradient(y: Label, z_l: &MomentVector) -> Result<AdfGradient, LayerError> {
    let (m, v) = scalar(z_l)?;
    let s = (v + 1.0).sqrt();
    let u = y.sign() * m / s;
    let gamma = inverse_mills(u);
    Ok(AdfGradient::new(
        gamma * y.sign() / s,
        -gamma * u / (2.0 * (v + 1.0)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn out(m: f64, v: f64) -> MomentVector {
        MomentVector::new(vec![m], vec![v]).unwrap()
    }

    #[test]
    fn symmetric_at_zero() {
        for &v in &[0.0, 0.3, 7.0] {
            assert_eq!(probit_log_z(Label::Click, &out(0.0, v)).unwrap(), 0.5f64.ln());
            assert_eq!(probit_log_z(Label::NoClick, &out(0.0, v)).unwrap(), 0.5f64.ln());
        }
    }

    #[test]
    fn quantile_value() {
        let z = probit_log_z(Label::Click, &out(1.959964 * 2f64.sqrt(), 1.0)).unwrap();
        assert!((z - 0.975f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn binary_normalization() {
        for &(m, v) in &[(0.3, 0.2), (-2.0, 1.5), (4.0, 0.01)] {
            let p = probit_log_z(Label::Click, &out(m, v)).unwrap().exp();
            let q = probit_log_z(Label::NoClick, &out(m, v)).unwrap().exp();
            assert!((p + q - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let h = 1e-6;
        for &y in &[Label::Click, Label::NoClick] {
            for &(m, v) in &[(0.3, 0.2), (-2.0, 1.5), (6.0, 0.01), (-30.0, 0.5)] {
                let g = probit_gradient(y, &out(m, v)).unwrap();
                let f = |m, v| probit_log_z(y, &out(m, v)).unwrap();
                let dm = (f(m + h, v) - f(m - h, v)) / (2.0 * h);
                let dv = (f(m, v + h) - f(m, v - h)) / (2.0 * h);
                assert!((g.d_mean - dm).abs() < 1e-6 * dm.abs().max(1.0));
                assert!((g.d_variance - dv).abs() < 1e-6 * dv.abs().max(1.0));
            }
        }
    }

    #[test]
    fn rejects_vector_output() {
        assert!(probit_log_z(Label::Click, &MomentVector::zeros(2)).is_err());
    }
}
