//! Zero-order-hold discretisation of a diagonal continuous-time system.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Below this magnitude `a` is treated as zero and the `Δ·b` limit is used.
pub const ZERO_POLE_EPS: f64 = 1e-12;

/// `exp(x)` and `exp(x) − 1` from a single transcendental call, each to
/// full relative precision.
#[inline]
pub(crate) fn exp_pair<T: Scalar>(x: T) -> (T, T) {
    if x < T::of(-0.5) {
        let e = x.exp();
        (e, e - T::one())
    } else {
        let m = x.exp_m1();
        (m + T::one(), m)
    }
}

/// `(ā, f, exp(Δa) − 1)` with `ā = exp(Δa)` and `f = (exp(Δa) − 1)/a`, so that `b̄ = f·b`.
#[inline]
pub(crate) fn zoh<T: Scalar>(delta: T, a: T) -> (T, T, T) {
    let (abar, em1) = exp_pair(delta * a);
    let f = if a.abs() < T::of(ZERO_POLE_EPS) { delta } else { em1 / a };
    (abar, f, em1)
}

/// `∂f/∂a` for `f = (exp(Δa) − 1)/a`, using the series near `Δa = 0`.
#[inline]
pub(crate) fn zoh_df_da<T: Scalar>(delta: T, a: T, abar: T, em1: T) -> T {
    let x = delta * a;
    if a.abs() < T::of(ZERO_POLE_EPS) || x.abs() < T::of(1e-4) {
        let d2 = delta * delta;
        d2 * (T::of(0.5) + x / T::of(3.0) + x * x / T::of(8.0) + x * x * x / T::of(30.0))
    } else {
        (x * abar - em1) / (a * a)
    }
}

/// Discretises pole `a` and input vector `b` for step `delta > 0`.
pub fn discretize_zoh<T: Scalar>(a: T, b: &[T], delta: T) -> Result<(T, Vec<T>)> {
    if !(delta > T::zero()) {
        return Err(Error::invalid(format!("step size must be positive, got {delta}")));
    }
    let (abar, f, _) = zoh(delta, a);
    Ok((abar, b.iter().map(|&bi| f * bi).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_decay_at_ln2() {
        let (abar, bbar) = discretize_zoh(-1.0f64, &[2.0, -4.0], std::f64::consts::LN_2).unwrap();
        assert!((abar - 0.5).abs() < 1e-15);
        assert!((bbar[0] - 1.0).abs() < 1e-15);
        assert!((bbar[1] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn tiny_step_limit() {
        let delta = 1e-8;
        let (abar, bbar) = discretize_zoh(-3.0f64, &[5.0], delta).unwrap();
        assert!((abar - 1.0).abs() < 1e-7);
        assert!((bbar[0] - delta * 5.0).abs() < 1e-14);
    }

    #[test]
    fn zero_pole_branch() {
        let (abar, bbar) = discretize_zoh(0.0f64, &[3.0], 0.25).unwrap();
        assert_eq!(abar, 1.0);
        assert_eq!(bbar[0], 0.75);
    }

    #[test]
    fn non_positive_step_rejected() {
        assert!(discretize_zoh(-1.0f64, &[1.0], 0.0).is_err());
        assert!(discretize_zoh(-1.0f64, &[1.0], -0.5).is_err());
    }

    #[test]
    fn df_da_matches_central_difference() {
        for &(delta, a) in &[(0.3f64, -2.0f64), (1e-3, -1.0), (0.05, -1e-5), (2.0, -0.7)] {
            let h = 1e-6;
            let f = |a: f64| zoh(delta, a).1;
            let fd = (f(a + h) - f(a - h)) / (2.0 * h);
            let (abar, _, em1) = zoh(delta, a);
            let an = zoh_df_da(delta, a, abar, em1);
            assert!((fd - an).abs() <= 1e-7 * an.abs().max(1.0), "{delta} {a}: {fd} vs {an}");
        }
    }
}
