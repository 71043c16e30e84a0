//! Finite-scale Dini derivatives and the checks built on them.
//!
//! A Dini derivative is a limit; everything here works over an explicit
//! ladder of scales and says nothing about the limit itself.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::trapezoid_uniform;

/// Default scale ladder `2^-4, ..., 2^-20`.
pub fn default_scales() -> Vec<f64> {
    (4..=20).map(|j| 2f64.powi(-j)).collect()
}

/// Samples on a uniform partition of `[a, b]`, linearly interpolated.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampledFunction {
    pub a: f64,
    pub b: f64,
    pub values: Vec<f64>,
}

impl SampledFunction {
    pub fn new(a: f64, b: f64, values: Vec<f64>) -> Result<Self> {
        if !(b > a) || values.len() < 2 {
            return Err(Error::InvalidConfig("need b > a and at least two samples".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("samples must be finite".into()));
        }
        Ok(Self { a, b, values })
    }

    pub fn from_fn(a: f64, b: f64, cells: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let cells = cells.max(1);
        Self::new(a, b, (0..=cells).map(|i| f(a + (b - a) * i as f64 / cells as f64)).collect())
    }

    pub fn step(&self) -> f64 {
        (self.b - self.a) / (self.values.len() - 1) as f64
    }

    pub fn t(&self, i: usize) -> f64 {
        self.a + i as f64 * self.step()
    }

    pub fn at(&self, t: f64) -> Result<f64> {
        let h = self.step();
        let s = (t - self.a) / h;
        let last = (self.values.len() - 1) as f64;
        if !(s >= -1e-9 && s <= last + 1e-9) {
            return Err(Error::OutOfRange(format!("t = {t} outside [{}, {}]", self.a, self.b)));
        }
        let s = s.clamp(0.0, last);
        let i = (s.floor() as usize).min(self.values.len() - 2);
        let w = s - i as f64;
        Ok(self.values[i] * (1.0 - w) + self.values[i + 1] * w)
    }

    /// Smallest and largest slope between consecutive samples.
    pub fn slope_range(&self) -> (f64, f64) {
        let h = self.step();
        self.values
            .windows(2)
            .map(|w| (w[1] - w[0]) / h)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s), hi.max(s)))
    }
}

fn check_scales(scales: &[f64]) -> Result<()> {
    if scales.is_empty() || scales.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::InvalidConfig("scales must be positive and non-empty".into()));
    }
    Ok(())
}

/// `min_h (f(t) - f(t - h)) / h` over `scales`; scales reaching past the
/// left end are skipped.
pub fn dini_lower_left(f: &SampledFunction, t: f64, scales: &[f64]) -> Result<f64> {
    check_scales(scales)?;
    if !(t > f.a && t <= f.b) {
        return Err(Error::OutOfRange(format!("t = {t} has no left neighbourhood")));
    }
    let ft = f.at(t)?;
    let q = scales
        .iter()
        .filter(|h| t - **h >= f.a - 1e-12)
        .map(|h| Ok((ft - f.at(t - h)?) / h))
        .collect::<Result<Vec<f64>>>()?;
    q.into_iter().reduce(f64::min).ok_or_else(|| Error::OutOfRange(format!("no scale fits left of t = {t}")))
}

/// `max_h (f(t + h) - f(t)) / h` over `scales`.
pub fn dini_upper_right(f: &SampledFunction, t: f64, scales: &[f64]) -> Result<f64> {
    check_scales(scales)?;
    if !(t >= f.a && t < f.b) {
        return Err(Error::OutOfRange(format!("t = {t} has no right neighbourhood")));
    }
    let ft = f.at(t)?;
    let q = scales
        .iter()
        .filter(|h| t + **h <= f.b + 1e-12)
        .map(|h| Ok((f.at(t + h)? - ft) / h))
        .collect::<Result<Vec<f64>>>()?;
    q.into_iter().reduce(f64::max).ok_or_else(|| Error::OutOfRange(format!("no scale fits right of t = {t}")))
}

/// Same as [`dini_lower_left`] for a function that can be evaluated anywhere.
pub fn dini_lower_left_fn(f: impl Fn(f64) -> f64, t: f64, scales: &[f64]) -> Result<f64> {
    check_scales(scales)?;
    let ft = f(t);
    Ok(scales.iter().map(|h| (ft - f(t - h)) / h).fold(f64::INFINITY, f64::min))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FtcReport {
    /// `g(b) - g(a)`
    pub lhs: f64,
    /// Trapezoid `int mu`.
    pub rhs: f64,
    pub quadrature_tolerance: f64,
    /// Interior grid points where the finite-scale `D_- g >= mu` fails.
    pub premise_failures: Vec<f64>,
    pub premise_holds: bool,
    pub conclusion_holds: bool,
}

/// Checks `g(b) - g(a) >= int mu` and whether its premise `D_- g >= mu`
/// holds at the interior grid points, with scales `1, 2, 4, ...` grid steps.
pub fn generalized_ftc_check(g: &SampledFunction, mu: &SampledFunction) -> Result<FtcReport> {
    if g.values.len() != mu.values.len() || g.a != mu.a || g.b != mu.b {
        return Err(Error::ConfigMismatch("g and mu must share a grid".into()));
    }
    let h = g.step();
    let n = g.values.len() - 1;
    let mut premise_failures = Vec::new();
    for i in 1..n {
        let scales: Vec<f64> = (0..).map(|j| h * (1usize << j) as f64).take_while(|s| *s <= g.t(i) - g.a + 1e-12).collect();
        let d = dini_lower_left(g, g.t(i), &scales)?;
        if d < mu.values[i] - 1e-12 * (1.0 + mu.values[i].abs()) {
            premise_failures.push(g.t(i));
        }
    }
    let lhs = g.values[n] - g.values[0];
    let rhs = trapezoid_uniform(&mu.values, h);
    // Richardson estimate against the trapezoid on every other sample
    let quadrature_tolerance = if n % 2 == 0 && n >= 2 {
        let coarse: Vec<f64> = mu.values.iter().step_by(2).copied().collect();
        (rhs - trapezoid_uniform(&coarse, 2.0 * h)).abs() / 3.0
    } else {
        0.0
    } + 1e-12 * (1.0 + rhs.abs());
    Ok(FtcReport {
        lhs,
        rhs,
        quadrature_tolerance,
        premise_holds: premise_failures.is_empty(),
        premise_failures,
        conclusion_holds: lhs >= rhs - quadrature_tolerance,
    })
}

/// Cantor function by ternary digits, truncated after `depth <= 40` digits.
pub fn cantor_function(x: f64, depth: usize) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let mut x = x;
    let mut y = 0.0;
    let mut scale = 0.5;
    for _ in 0..depth.min(40) {
        x *= 3.0;
        let d = x.floor();
        x -= d;
        if d >= 2.0 {
            y += scale;
        } else if d >= 1.0 {
            return y + scale;
        }
        scale *= 0.5;
    }
    y
}

/// `g = -Cantor`, `mu = 0` on `[0, 1]` sampled on `3^min(depth, 8)` cells.
pub fn cantor_counterexample(depth: usize) -> Result<FtcReport> {
    let cells = 3usize.pow(depth.clamp(1, 8) as u32);
    let g = SampledFunction::from_fn(0.0, 1.0, cells, |t| -cantor_function(t, depth))?;
    let mu = SampledFunction::new(0.0, 1.0, vec![0.0; cells + 1])?;
    generalized_ftc_check(&g, &mu)
}

pub fn monotonicity_check(g: &SampledFunction) -> bool {
    g.values.windows(2).all(|w| w[1] >= w[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_unit_lower_left_derivative() {
        let f = SampledFunction::from_fn(0.0, 1.0, 64, |t| t).unwrap();
        for t in [0.25, 0.5, 0.9] {
            let d = dini_lower_left(&f, t, &default_scales()).unwrap();
            assert!((d - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn abs_kink_has_slope_minus_one_from_the_left() {
        let f = SampledFunction::from_fn(0.0, 1.0, 64, |t| (t - 0.5).abs()).unwrap();
        let d = dini_lower_left(&f, 0.5, &[0.25, 0.125, 1.0 / 64.0]).unwrap();
        assert!((d + 1.0).abs() < 1e-12);
        assert!(dini_lower_left(&f, 0.0, &[0.1]).is_err());
    }

    #[test]
    fn minus_cantor_quotients_blow_up_at_one_third() {
        let mut last = 0.0;
        for depth in [4, 8, 12, 16] {
            let scales: Vec<f64> = (1..=depth).map(|j| 3f64.powi(-(j as i32))).collect();
            let d = dini_lower_left_fn(|t| -cantor_function(t, depth + 4), 1.0 / 3.0, &scales).unwrap();
            assert!(d < last, "depth {depth}: {d}");
            last = d;
        }
        assert!(last < -100.0);
    }

    #[test]
    fn cantor_basics() {
        assert_eq!(cantor_function(0.0, 30), 0.0);
        assert_eq!(cantor_function(1.0, 30), 1.0);
        assert_eq!(cantor_function(1.0 / 3.0, 30), 0.5);
        assert_eq!(cantor_function(2.0 / 3.0, 30), 0.5);
        assert_eq!(cantor_function(1.0 / 9.0, 30), 0.25);
        let mut prev = 0.0;
        for i in 0..=10_000 {
            let v = cantor_function(i as f64 / 10_000.0, 30);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn cantor_counterexample_is_exact() {
        for depth in [1, 3, 6, 20] {
            let r = cantor_counterexample(depth).unwrap();
            assert_eq!(r.lhs, -1.0);
            assert_eq!(r.rhs, 0.0);
            assert!(!r.premise_holds && !r.conclusion_holds);
        }
    }

    #[test]
    fn ftc_on_a_parabola() {
        let g = SampledFunction::from_fn(0.0, 1.0, 100, |t| t * t).unwrap();
        let mu = SampledFunction::new(0.0, 1.0, vec![0.0; 101]).unwrap();
        let r = generalized_ftc_check(&g, &mu).unwrap();
        assert!(r.premise_holds && r.conclusion_holds);
        assert_eq!(r.lhs, 1.0);
    }

    #[test]
    fn monotonicity_examples() {
        assert!(monotonicity_check(&SampledFunction::from_fn(0.0, 1.0, 50, f64::exp).unwrap()));
        assert!(!monotonicity_check(&SampledFunction::from_fn(0.0, 1.0, 50, |t| -t).unwrap()));
    }
}
