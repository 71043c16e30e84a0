//! Grid-level realization of the product space `R x L^2(-T, 0)`: the shift
//! semigroup, the inverse generator, the weaker `-1` norm, mild solutions
//! and the pointwise-delay counterexample.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dynamics::ControlPath;
use crate::error::{Error, Result};
use crate::model::{trapezoid_uniform, DelayMode, HistoryState, ProblemConfig};

/// A point of the product space. `eta1` holds `N + 1` samples on the closed
/// grid `-T + i h`, `i = 0..=N`, so the value at `s = 0` is explicit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HilbertPoint {
    pub eta0: f64,
    pub eta1: Vec<f64>,
}

impl HilbertPoint {
    pub fn new(eta0: f64, eta1: Vec<f64>) -> Self {
        Self { eta0, eta1 }
    }

    pub fn zero(n_hist: usize) -> Self {
        Self { eta0: 0.0, eta1: vec![0.0; n_hist + 1] }
    }

    pub fn is_finite(&self) -> bool {
        self.eta0.is_finite() && self.eta1.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, lambda: f64) -> Self {
        Self {
            eta0: lambda * self.eta0,
            eta1: self.eta1.iter().map(|v| lambda * v).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            eta0: self.eta0 - other.eta0,
            eta1: self.eta1.iter().zip(&other.eta1).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            eta0: self.eta0 + other.eta0,
            eta1: self.eta1.iter().zip(&other.eta1).map(|(a, b)| a + b).collect(),
        }
    }

    /// History samples on `[-T, 0)` as used by the delay integrator.
    pub fn to_history(&self) -> HistoryState {
        HistoryState {
            eta0: self.eta0,
            eta1: self.eta1[..self.eta1.len() - 1].to_vec(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.eta1
            .iter()
            .zip(&other.eta1)
            .map(|(a, b)| (a - b).abs())
            .fold((self.eta0 - other.eta0).abs(), f64::max)
    }
}

impl From<&HistoryState> for HilbertPoint {
    fn from(eta: &HistoryState) -> Self {
        let mut eta1 = eta.eta1.clone();
        eta1.push(eta.eta0);
        Self { eta0: eta.eta0, eta1 }
    }
}

fn grid_step(window: f64, p: &HilbertPoint) -> f64 {
    window / (p.eta1.len() - 1) as f64
}

/// `sqrt(eta0^2 + int eta1^2)` with trapezoid weights.
pub fn h_norm(window: f64, p: &HilbertPoint) -> f64 {
    let sq: Vec<f64> = p.eta1.iter().map(|v| v * v).collect();
    (p.eta0 * p.eta0 + trapezoid_uniform(&sq, grid_step(window, p))).sqrt()
}

/// Linear interpolation of the history of `p` at `s` in `[-T, 0]`.
fn history_at(window: f64, p: &HilbertPoint, s: f64) -> f64 {
    let n = p.eta1.len() - 1;
    let u = ((s + window) / grid_step(window, p)).clamp(0.0, n as f64);
    let i = (u.floor() as usize).min(n - 1);
    let w = u - i as f64;
    p.eta1[i] * (1.0 - w) + p.eta1[i + 1] * w
}

/// `S(t) p`: the history shifts left, the present grows like `e^{r t}`.
pub fn apply_semigroup(cfg: &ProblemConfig, t: f64, p: &HilbertPoint) -> HilbertPoint {
    if t == 0.0 {
        return p.clone();
    }
    let window = cfg.window;
    let h = grid_step(window, p);
    let n = p.eta1.len() - 1;
    let eta1 = (0..=n)
        .map(|i| {
            let s = -window + i as f64 * h;
            let u = t + s;
            // tolerance keeps grid-commensurate shifts on exact nodes
            if u < -1e-12 * window {
                history_at(window, p, u)
            } else {
                p.eta0 * (cfg.r * u.max(0.0)).exp()
            }
        })
        .collect();
    HilbertPoint { eta0: p.eta0 * (cfg.r * t).exp(), eta1 }
}

/// `A^{-1}(eta0, eta1) = (eta0 / r, s -> eta0 / r - int_s^0 eta1)`.
pub fn apply_a_inverse(cfg: &ProblemConfig, p: &HilbertPoint) -> Result<HilbertPoint> {
    if cfg.r == 0.0 {
        return Err(Error::DivisionByZero("A^{-1} needs r != 0"));
    }
    let q0 = p.eta0 / cfg.r;
    let h = grid_step(cfg.window, p);
    let n = p.eta1.len() - 1;
    let mut q1 = vec![q0; n + 1];
    let mut tail = 0.0;
    for i in (0..n).rev() {
        tail += 0.5 * h * (p.eta1[i] + p.eta1[i + 1]);
        q1[i] = q0 - tail;
    }
    Ok(HilbertPoint { eta0: q0, eta1: q1 })
}

/// Discrete generator on `D(A)`: `(r q0, forward differences of q1)`.
/// Returns the cell slopes, one per history cell.
pub fn discrete_a(cfg: &ProblemConfig, q: &HilbertPoint) -> (f64, Vec<f64>) {
    let h = grid_step(cfg.window, q);
    let slopes = q.eta1.windows(2).map(|w| (w[1] - w[0]) / h).collect();
    (cfg.r * q.eta0, slopes)
}

/// `||A^{-1} p||`.
pub fn minus_one_norm(cfg: &ProblemConfig, p: &HilbertPoint) -> Result<f64> {
    Ok(h_norm(cfg.window, &apply_a_inverse(cfg, p)?))
}

/// Mild solution sampled at the state grid nodes of `[0, horizon]`.
///
/// The first component solves
/// `X0(t) = e^{rt} eta0 + int_0^t e^{r(t-s)} (f0(X0, <a, X1>) - c) ds`
/// by Picard iteration with the exponential trapezoid rule, run on `dt`
/// and `dt / 2` and combined by Richardson extrapolation. `X1(t)` is the
/// window of the scalar path.
pub fn mild_solve(
    cfg: &ProblemConfig,
    p: &HilbertPoint,
    c: &ControlPath,
    horizon: f64,
) -> Result<Vec<HilbertPoint>> {
    cfg.check_grid()?;
    let n = cfg.n_hist();
    if p.eta1.len() != n + 1 {
        return Err(Error::ConfigMismatch(format!(
            "point has {} history nodes, grid needs {}",
            p.eta1.len(),
            n + 1
        )));
    }
    let m = cfg.numerics.substeps;
    let steps = ((horizon / cfg.dt()) - 1e-9).ceil().max(1.0) as usize;
    let coarse = picard(cfg, p, c, m, steps)?;
    let fine = picard(cfg, p, c, 2 * m, 2 * steps)?;
    // both runs share the history prefix; extrapolate the forward part
    let lag = n * m;
    let mut x = coarse.clone();
    for k in 0..=steps {
        x[lag + k] = (4.0 * fine[2 * lag + 2 * k] - coarse[lag + k]) / 3.0;
    }
    Ok((0..=steps)
        .map(|k| HilbertPoint {
            eta0: x[lag + k],
            eta1: (0..=n).map(|i| x[k + i * m]).collect(),
        })
        .collect())
}

/// Node values on `[-T, steps dt]` for a state grid of `m` substeps per cell.
fn picard(
    cfg: &ProblemConfig,
    p: &HilbertPoint,
    c: &ControlPath,
    m: usize,
    steps: usize,
) -> Result<Vec<f64>> {
    let n = cfg.n_hist();
    let h = cfg.h();
    let dt = h / m as f64;
    let lag = n * m;
    let weights = cfg.kernel_weights();
    let controls = c.per_state_step(dt, steps).or_else(|_| {
        // a control step matching the coarse grid also fits the fine one
        c.per_state_step(dt * 2.0, steps.div_ceil(2))
            .map(|v| v.iter().flat_map(|x| [*x, *x]).take(steps).collect())
    })?;
    let mut x: Vec<f64> = (0..lag)
        .map(|j| {
            let i = j / m;
            let w = (j % m) as f64 / m as f64;
            let right = if i + 1 < n { p.eta1[i + 1] } else { p.eta0 };
            p.eta1[i] * (1.0 - w) + right * w
        })
        .collect();
    x.extend(std::iter::repeat(p.eta0).take(steps + 1));

    let growth = (cfg.r * dt).exp();
    let c_mass = if cfg.r == 0.0 { dt } else { (cfg.r * dt).exp_m1() / cfg.r };
    let g_at = |x: &[f64], k: usize| -> f64 {
        let j = lag + k;
        let y = match cfg.delay_mode {
            DelayMode::Kernel => (0..=n).map(|i| weights[i] * x[j - (n - i) * m]).sum(),
            DelayMode::PointwiseMidpoint => x[j - lag / 2],
        };
        cfg.dynamics.f0(x[j], y)
    };

    let mut g = vec![0.0; steps + 1];
    for iteration in 1..=200 {
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = g_at(&x, k);
        }
        let mut next = x[lag];
        let mut diff = 0.0f64;
        for k in 0..steps {
            next = growth * next + 0.5 * dt * (growth * g[k] + g[k + 1]) - controls[k] * c_mass;
            if !next.is_finite() {
                return Err(Error::NonFiniteState { t: (k + 1) as f64 * dt });
            }
            diff = diff.max((next - x[lag + k + 1]).abs());
            x[lag + k + 1] = next;
        }
        if diff < 1e-10 {
            return Ok(x);
        }
        if iteration == 200 {
            return Err(Error::NoConvergence { iterations: 200, residual: diff });
        }
    }
    unreachable!()
}

/// Largest ratio `||X(t) - Y(t)||_{-1} / ||p - q||_{-1}` over the grid of
/// `[0, horizon]` for zero-control mild solutions.
pub fn minus_one_lipschitz_ratio(
    cfg: &ProblemConfig,
    p: &HilbertPoint,
    q: &HilbertPoint,
    horizon: f64,
) -> Result<f64> {
    let zero = ControlPath::zero(cfg.dt());
    let xs = mild_solve(cfg, p, &zero, horizon)?;
    let ys = mild_solve(cfg, q, &zero, horizon)?;
    let base = minus_one_norm(cfg, &p.sub(q))?;
    if base == 0.0 {
        return Err(Error::DivisionByZero("identical initial points"));
    }
    let mut worst = 0.0f64;
    for (a, b) in xs.iter().zip(&ys) {
        worst = worst.max(minus_one_norm(cfg, &a.sub(b))?);
    }
    Ok(worst / base)
}

// ---------------------------------------------------------------------------
// Pointwise delay counterexample
// ---------------------------------------------------------------------------

/// Constant of the inverse generator for `y' = r y + y(t - T)`:
/// `(eta0 - r int eta1) / (r + 1)`.
pub fn remark_generator_constant(eta0: f64, integral: f64, r: f64) -> f64 {
    eta0 / (r + 1.0) - r / (r + 1.0) * integral
}

/// `A^{-1}` of the pointwise-delay generator: `((eta0 - c)/r, c + int_{-T}^s eta1)`.
pub fn pointwise_a_inverse(window: f64, r: f64, p: &HilbertPoint) -> HilbertPoint {
    let h = grid_step(window, p);
    let mut partial = vec![0.0; p.eta1.len()];
    for i in 1..p.eta1.len() {
        partial[i] = partial[i - 1] + 0.5 * h * (p.eta1[i - 1] + p.eta1[i]);
    }
    let c = remark_generator_constant(p.eta0, partial[partial.len() - 1], r);
    HilbertPoint {
        eta0: (p.eta0 - c) / r,
        eta1: partial.iter().map(|v| c + v).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CounterexampleRow {
    pub n: usize,
    pub abs_eta0: f64,
    pub minus_one_norm: f64,
    /// Trapezoid value of `int eta1`, which the construction fixes.
    pub history_integral: f64,
}

pub const COUNTEREXAMPLE_R: f64 = 1.0 / 3.0;

/// Member `n` of the family: `eta0 = 1/2` and `eta1` a triangle of width
/// `T / n` at `-T` carrying total mass `-1/2`, so the present component of
/// the inverse vanishes and the history component is supported on `T / n`.
pub fn counterexample_point(window: f64, n: usize) -> HilbertPoint {
    let cells = 4 * n;
    let height = -1.0 * n as f64 / window;
    let eta1 = (0..=cells)
        .map(|i| match i {
            0 | 4.. => 0.0,
            2 => height,
            _ => 0.5 * height,
        })
        .collect();
    HilbertPoint { eta0: 0.5, eta1 }
}

/// Rows for `n = 1, 2, 4, ..., n_max`.
pub fn pointwise_delay_counterexample(window: f64, n_max: usize) -> Vec<CounterexampleRow> {
    let mut rows = Vec::new();
    let mut n = 1;
    while n <= n_max.max(1) {
        let p = counterexample_point(window, n);
        let q = pointwise_a_inverse(window, COUNTEREXAMPLE_R, &p);
        let h = grid_step(window, &p);
        rows.push(CounterexampleRow {
            n,
            abs_eta0: p.eta0.abs(),
            minus_one_norm: h_norm(window, &q),
            history_integral: trapezoid_uniform(&p.eta1, h),
        });
        n *= 2;
    }
    rows
}

pub fn write_counterexample_csv<W: Write>(rows: &[CounterexampleRow], mut out: W) -> Result<()> {
    writeln!(out, "n,abs_eta0,minus_one_norm")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.n, r.abs_eta0, r.minus_one_norm)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::integrate;
    use crate::model::{preset, ProductionLaw};

    fn cfg() -> ProblemConfig {
        preset("saturating-production").unwrap()
    }

    fn smooth_point(n: usize) -> HilbertPoint {
        HilbertPoint::new(
            0.7,
            (0..=n).map(|i| (3.0 * i as f64 / n as f64).sin() + 0.2).collect(),
        )
    }

    #[test]
    fn semigroup_at_zero_is_identity() {
        let p = smooth_point(64);
        assert_eq!(apply_semigroup(&cfg(), 0.0, &p), p);
    }

    #[test]
    fn half_window_shift_of_zero_history() {
        let mut c = cfg();
        c.r = 0.0;
        let p = HilbertPoint::new(1.0, vec![0.0; 65]);
        let q = apply_semigroup(&c, 0.5, &p);
        assert_eq!(q.eta0, 1.0);
        for (i, v) in q.eta1.iter().enumerate() {
            assert_eq!(*v, if i < 32 { 0.0 } else { 1.0 }, "node {i}");
        }
    }

    #[test]
    fn semigroup_law_on_commensurate_times() {
        let c = cfg();
        let p = smooth_point(64);
        let h = c.h();
        for (a, b) in [(3, 5), (10, 40), (64, 7), (1, 100)] {
            let (s, t) = (a as f64 * h, b as f64 * h);
            let lhs = apply_semigroup(&c, t, &apply_semigroup(&c, s, &p));
            let rhs = apply_semigroup(&c, s + t, &p);
            assert!(lhs.max_abs_diff(&rhs) < 1e-8, "s = {s}, t = {t}");
        }
    }

    #[test]
    fn a_inverse_examples() {
        let c = cfg();
        let q = apply_a_inverse(&c, &HilbertPoint::new(c.r, vec![0.0; 65])).unwrap();
        assert!((q.eta0 - 1.0).abs() < 1e-15);
        assert!(q.eta1.iter().all(|v| (v - 1.0).abs() < 1e-15));
        let q = apply_a_inverse(&c, &HilbertPoint::new(0.0, vec![1.0; 65])).unwrap();
        for (i, v) in q.eta1.iter().enumerate() {
            let s = -1.0 + i as f64 / 64.0;
            assert!((v - s).abs() < 1e-12);
        }
        assert_eq!(q.eta1[64], q.eta0);
    }

    #[test]
    fn a_inverse_needs_nonzero_r() {
        let mut c = cfg();
        c.r = 0.0;
        let err = apply_a_inverse(&c, &smooth_point(64)).unwrap_err();
        assert_eq!(err.kind(), "DivisionByZero");
    }

    #[test]
    fn a_after_a_inverse_round_trips() {
        let c = cfg();
        let p = smooth_point(64);
        let q = apply_a_inverse(&c, &p).unwrap();
        let (q0, slopes) = discrete_a(&c, &q);
        assert!((q0 - p.eta0).abs() < 1e-12);
        for (i, s) in slopes.iter().enumerate() {
            let mean = 0.5 * (p.eta1[i] + p.eta1[i + 1]);
            assert!((s - mean).abs() < 1e-8, "cell {i}");
        }
    }

    #[test]
    fn minus_one_norm_examples() {
        let c = cfg();
        assert_eq!(minus_one_norm(&c, &HilbertPoint::zero(64)).unwrap(), 0.0);
        let v = minus_one_norm(&c, &HilbertPoint::new(c.r, vec![0.0; 65])).unwrap();
        assert!((v - 2f64.sqrt()).abs() < 1e-12);
        let p = smooth_point(64);
        let base = minus_one_norm(&c, &p).unwrap();
        for lambda in [-3.0, 0.5, 7.0] {
            let scaled = minus_one_norm(&c, &p.scale(lambda)).unwrap();
            assert!((scaled - lambda.abs() * base).abs() < 1e-12 * (1.0 + scaled));
        }
    }

    #[test]
    fn mild_solution_without_forcing_is_the_semigroup() {
        let mut c = cfg();
        c.dynamics.f0 = ProductionLaw::Linear { alpha: 0.0, beta: 0.0 };
        let eta = HistoryState::new(0.7, (0..64).map(|i| 0.2 + i as f64 * 0.01).collect());
        let p = HilbertPoint::from(&eta);
        let xs = mild_solve(&c, &p, &ControlPath::zero(c.dt()), 2.0).unwrap();
        for (k, x) in xs.iter().enumerate() {
            let s = apply_semigroup(&c, k as f64 * c.dt(), &p);
            assert!(x.max_abs_diff(&s) < 1e-12, "step {k}");
        }
    }

    #[test]
    fn mild_solution_matches_delay_integrator() {
        for name in crate::model::PRESET_NAMES {
            let c = preset(name).unwrap();
            let eta = HistoryState::new(1.2, (0..64).map(|i| 0.8 + 0.3 * (i as f64 * 0.1).cos()).collect());
            let ctrl = ControlPath::constant(c.dt(), 0.15, 4.0);
            let xs = mild_solve(&c, &HilbertPoint::from(&eta), &ctrl, 4.0).unwrap();
            let traj = integrate(&c, &eta, &ctrl, 4.0).unwrap();
            for (k, x) in xs.iter().enumerate() {
                let y = traj.forward()[k];
                assert!((x.eta0 - y).abs() < 1e-6, "{name} step {k}: {} vs {y}", x.eta0);
            }
            // windows of the scalar path
            let last = xs.last().unwrap();
            let n = traj.values.len();
            for i in 0..=64 {
                assert!((last.eta1[i] - traj.values[n - 65 + i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn counterexample_constant_matches_formula() {
        assert!((remark_generator_constant(0.5, 1.0, COUNTEREXAMPLE_R) - 0.125).abs() < 1e-15);
        assert!((remark_generator_constant(0.5, -0.5, COUNTEREXAMPLE_R) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn counterexample_table_shrinks() {
        let rows = pointwise_delay_counterexample(1.0, 2048);
        assert_eq!(rows.len(), 12);
        for r in &rows {
            assert_eq!(r.abs_eta0, 0.5);
            assert!((r.history_integral + 0.5).abs() < 1e-12);
        }
        assert!(rows.windows(2).all(|w| w[1].minus_one_norm < w[0].minus_one_norm));
        assert!(rows.last().unwrap().minus_one_norm < 1e-2);
        let q = pointwise_a_inverse(1.0, COUNTEREXAMPLE_R, &counterexample_point(1.0, 8));
        assert!(q.eta0.abs() < 1e-12);
    }
}
