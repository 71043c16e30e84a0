//! `H(z) = sup_{c >= 0} (U1(c) - z c)` and its maximizer.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::UtilitySpec;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HamiltonianValue {
    pub h: f64,
    pub c_star: f64,
    pub converged: bool,
    /// `|U1'(c_star) - z| / (1 + z)`; zero when the maximizer sits at `c = 0`.
    pub residual: f64,
}

const LOWEST: f64 = 1e-300;
const HIGHEST: f64 = 1e300;

/// Solves `U1'(c) = z` for `z > 0`.
pub fn legendre(u1: &UtilitySpec, zeta0: f64) -> Result<HamiltonianValue> {
    if !(zeta0 > 0.0) {
        return Err(Error::NonPositiveSlope(zeta0));
    }
    let g = |c: f64| u1.u_prime(c) - zeta0;
    let tol = 1e-12 * (1.0 + zeta0);

    let (mut lo, mut hi) = (1e-12, 1.0);
    while g(lo) <= 0.0 {
        if lo <= LOWEST {
            // slope dominates everywhere: the supremum is taken at c = 0
            return Ok(HamiltonianValue { h: u1.u_at_zero(), c_star: 0.0, converged: true, residual: 0.0 });
        }
        hi = lo;
        lo = (lo * 1e-8).max(LOWEST);
    }
    while g(hi) > 0.0 {
        if hi >= HIGHEST {
            return Err(Error::NoConvergence { iterations: 0, residual: g(hi) / (1.0 + zeta0) });
        }
        lo = hi;
        hi *= 2.0;
    }

    // geometric bisection down to a narrow bracket
    let mut iterations = 0;
    while hi / lo > 1.0 + 1e-3 && iterations < 2000 {
        let mid = (lo * hi).sqrt();
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }

    // safeguarded Newton with a finite-difference slope of U1'
    let mut c = (lo * hi).sqrt();
    let mut gc = g(c);
    for _ in 0..200 {
        if gc.abs() <= tol {
            break;
        }
        if gc > 0.0 {
            lo = c;
        } else {
            hi = c;
        }
        let d = 1e-6 * c;
        let slope = (u1.u_prime(c + d) - u1.u_prime(c - d)) / (2.0 * d);
        let mut next = c - gc / slope;
        if !(slope < 0.0) || !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if next == c {
            break;
        }
        c = next;
        gc = g(c);
    }
    let residual = gc.abs() / (1.0 + zeta0);
    Ok(HamiltonianValue {
        h: u1.u(c) - zeta0 * c,
        c_star: c,
        converged: gc.abs() <= tol,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut x1 = b - phi * (b - a);
        let mut x2 = a + phi * (b - a);
        let (mut f1, mut f2) = (f(x1), f(x2));
        for _ in 0..300 {
            if f1 < f2 {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + phi * (b - a);
                f2 = f(x2);
            } else {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - phi * (b - a);
                f1 = f(x1);
            }
        }
        f(0.5 * (a + b))
    }

    #[test]
    fn matches_golden_section_oracle() {
        let u1 = UtilitySpec::default_power();
        let v = legendre(&u1, 0.1).unwrap();
        let oracle = golden_max(|c| u1.u(c) - 0.1 * c, 0.0, 1e6);
        assert!(v.converged);
        assert!((v.h - oracle).abs() < 1e-8, "{} vs {oracle}", v.h);
    }

    #[test]
    fn huge_slope_pins_to_zero_consumption() {
        let u1 = UtilitySpec::default_power();
        let v = legendre(&u1, 1e9).unwrap();
        assert!(v.c_star < 1e-15);
        assert!((v.h - u1.u_at_zero()).abs() < 1e-8);
    }

    #[test]
    fn envelope_identity() {
        let u1 = UtilitySpec::default_power();
        for c in [1e-6, 1e-3, 0.3, 1.0, 7.0, 250.0] {
            let v = legendre(&u1, u1.u_prime(c)).unwrap();
            assert!((v.c_star - c).abs() < 1e-8 * c, "c = {c}: {}", v.c_star);
            assert!((v.h - (u1.u(c) - u1.u_prime(c) * c)).abs() < 1e-12);
            assert!(v.residual < 1e-10);
        }
    }

    #[test]
    fn rejects_nonpositive_slope() {
        let u1 = UtilitySpec::default_power();
        assert_eq!(legendre(&u1, 0.0).unwrap_err(), Error::NonPositiveSlope(0.0));
        assert!(legendre(&u1, -1.0).is_err());
    }
}
