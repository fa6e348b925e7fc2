use crate::error::{Error, Result};

/// `∫₀ˣ f(τ)·g(x−τ) dτ` by composite Simpson quadrature with `steps` (even) panels.
pub fn quad_convolve(
    f: impl Fn(f64) -> f64,
    g: impl Fn(f64) -> f64,
    x: f64,
    steps: usize,
) -> Result<f64> {
    if steps < 2 || !steps.is_multiple_of(2) {
        return Err(Error::arg(format!("Simpson needs an even step count >= 2, got {steps}")));
    }
    if !(x >= 0.0 && x.is_finite()) {
        return Err(Error::arg(format!("upper limit must be finite and >= 0, got {x}")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    let h = x / steps as f64;
    let mut acc = 0.0;
    for i in 0..=steps {
        let tau = if i == steps { x } else { i as f64 * h };
        let v = f(tau) * g(x - tau);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("integrand at tau = {tau}")));
        }
        let w = if i == 0 || i == steps {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * v;
    }
    Ok(acc * h / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn cos_sin_examples() {
        let v = quad_convolve(f64::cos, f64::sin, PI / 2.0, 1000).unwrap();
        assert!((v - PI / 4.0).abs() < 1e-9, "{v}");
        assert_eq!(quad_convolve(f64::cos, f64::sin, 0.0, 1000).unwrap(), 0.0);
        assert!(quad_convolve(f64::cos, f64::sin, PI, 1000).unwrap().abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(quad_convolve(f64::cos, f64::sin, 1.0, 3).is_err());
        assert!(quad_convolve(f64::cos, f64::sin, 1.0, 0).is_err());
        assert!(quad_convolve(f64::cos, f64::sin, -1.0, 10).is_err());
        assert!(matches!(
            quad_convolve(|t| 1.0 / t, f64::sin, 1.0, 10),
            Err(Error::NonFinite(_))
        ));
    }
}
