//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f32 = 1e-3;

/// Maximum over coordinates of `|analytic − numeric| / max(1, |numeric|)`,
/// where `numeric` is the central difference `(f(x+h) − f(x−h)) / 2h`.
pub fn finite_difference_check<F>(mut f: F, x: &Tensor, analytic: &Tensor, h: f32) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if analytic.shape() != x.shape() {
        return Err(Error::shape("finite_difference_check", x.shape(), analytic.shape()));
    }
    let base = f(x)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {base}")));
    }
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("f(x ± h) at coordinate {i}")));
        }
        // The realized step can differ from h after f32 rounding.
        let step = (orig + h) as f64 - (orig - h) as f64;
        let numeric = (plus - minus) / step;
        let err = (analytic.data()[i] as f64 - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(vec![0.5, -1.25, 2.0, 0.0]);
        let grad = Tensor::vector(x.data().iter().map(|v| 2.0 * v).collect());
        let err = finite_difference_check(
            |t| Ok(t.data().iter().map(|&v| (v as f64).powi(2)).sum()),
            &x,
            &grad,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let x = Tensor::vector(vec![1.0]);
        let r = finite_difference_check(|_| Ok(f64::NAN), &x, &x, DEFAULT_STEP);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
