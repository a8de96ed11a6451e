//! Central finite differences: the reference every analytic gradient in the crate is checked
//! against.

use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Central-difference gradient of `f` at `x`.
///
/// Component `i` is `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)`.
pub fn numgrad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidConfig(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = f(&probe);
        probe[i] = orig - eps;
        let lo = f(&probe);
        probe[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NumericalDomain(format!(
                "non-finite function value while probing component {i}"
            )));
        }
        out.push((hi - lo) / (2.0 * eps));
    }
    Ok(out)
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)` used by the gradient checks.
pub fn rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let g = numgrad(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], DEFAULT_EPS).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6);
        assert!((g[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant_gives_zero() {
        let g = numgrad(|_| 3.5, &[0.1, -4.0, 2.0], DEFAULT_EPS).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilinear_is_exact() {
        let g = numgrad(|x| x[0] * x[1], &[3.0, 5.0], DEFAULT_EPS).unwrap();
        assert!((g[0] - 5.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn non_finite_is_rejected() {
        let err = numgrad(|x| (x[0] - 1e-5).ln(), &[0.0], 1e-5).unwrap_err();
        assert!(matches!(err, Error::NumericalDomain(_)));
    }

    #[test]
    fn bad_eps_is_config_error() {
        assert!(matches!(
            numgrad(|_| 0.0, &[1.0], 0.0),
            Err(Error::InvalidConfig(_))
        ));
    }
}
