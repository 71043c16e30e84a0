//! Method-of-steps RK4 integration of the delay equation, the discounted
//! objective and the comparison oracle.
//!
//! Values are kept on a half-step lattice: node `n` of the state grid sits
//! at half-index `2 (N m + n)` (time `-T + n dt`), step midpoints at the odd
//! indices. Every RK4 stage then reads its delayed values exactly from the
//! lattice; midpoints of computed steps come from cubic Hermite data.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DelayMode, HistoryState, ProblemConfig, ProductionLaw};

/// Piecewise-constant consumption; zero after the last value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPath {
    pub dt: f64,
    pub values: Vec<f64>,
}

impl ControlPath {
    pub fn new(dt: f64, values: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidConfig(format!("control step must be positive, got {dt}")));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig(format!("control value {v} is not a finite c >= 0")));
        }
        Ok(Self { dt, values })
    }

    pub fn zero(dt: f64) -> Self {
        Self { dt, values: Vec::new() }
    }

    /// `c = level` on `[0, until)`.
    pub fn constant(dt: f64, level: f64, until: f64) -> Self {
        let n = ((until / dt) - 1e-9).ceil().max(0.0) as usize;
        Self { dt, values: vec![level.max(0.0); n] }
    }

    pub fn at(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        let i = (t / self.dt + 1e-9).floor() as usize;
        self.values.get(i).copied().unwrap_or(0.0)
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.values.len() as f64
    }

    /// Expands to one value per state step over `steps` steps.
    pub fn per_state_step(&self, state_dt: f64, steps: usize) -> Result<Vec<f64>> {
        let ratio = self.dt / state_dt;
        let k = ratio.round();
        if k < 1.0 || (ratio - k).abs() > 1e-9 * ratio {
            return Err(Error::ConfigMismatch(format!(
                "control step {} is not a multiple of state step {state_dt}",
                self.dt
            )));
        }
        let k = k as usize;
        Ok((0..steps).map(|n| self.values.get(n / k).copied().unwrap_or(0.0)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    /// Time of `values[0]`, i.e. `-T`.
    pub start: f64,
    pub values: Vec<f64>,
    /// Consumption applied on each state step of `[0, horizon)`.
    pub controls: Vec<f64>,
    pub admissible: bool,
    /// Minimum of `x` over `t >= 0`.
    pub min_value: f64,
}

impl Trajectory {
    /// Index of the node at `t = 0`.
    pub fn origin(&self) -> usize {
        (-self.start / self.dt).round() as usize
    }

    pub fn horizon(&self) -> f64 {
        (self.values.len() - 1 - self.origin()) as f64 * self.dt
    }

    pub fn time(&self, i: usize) -> f64 {
        self.start + i as f64 * self.dt
    }

    /// Values on `[0, horizon]`.
    pub fn forward(&self) -> &[f64] {
        &self.values[self.origin()..]
    }

    pub fn final_value(&self) -> f64 {
        *self.values.last().expect("non-empty trajectory")
    }

    /// Linear interpolation; `OutOfRange` outside `[-T, horizon]`.
    pub fn at(&self, t: f64) -> Result<f64> {
        let s = (t - self.start) / self.dt;
        let last = (self.values.len() - 1) as f64;
        if !(s >= -1e-9 && s <= last + 1e-9) {
            return Err(Error::OutOfRange(format!("t = {t}")));
        }
        let s = s.clamp(0.0, last);
        let i = (s.floor() as usize).min(self.values.len() - 2);
        let w = s - i as f64;
        Ok(self.values[i] * (1.0 - w) + self.values[i + 1] * w)
    }

    pub fn is_nondecreasing_from(&self, t: f64, tol: f64) -> bool {
        let i0 = ((t - self.start) / self.dt).round().max(0.0) as usize;
        self.values[i0.min(self.values.len() - 1)..]
            .windows(2)
            .all(|w| w[1] >= w[0] - tol)
    }
}

pub fn positivity_tolerance(eta0: f64) -> f64 {
    1e-12 * (1.0 + eta0.abs())
}

/// Incremental integrator. Cloning snapshots the whole state.
#[derive(Clone, Debug)]
pub struct DelayStepper {
    r: f64,
    f0: ProductionLaw,
    weights: Vec<f64>,
    mode: DelayMode,
    n_hist: usize,
    m: usize,
    dt: f64,
    lag_cells: usize,
    half: Vec<f64>,
    steps: usize,
    /// `(c, x'(t_n+))` carried over from the previous step.
    carry: Option<(f64, f64)>,
}

impl DelayStepper {
    pub fn new(cfg: &ProblemConfig, eta: &HistoryState) -> Result<Self> {
        cfg.check_grid()?;
        let n = cfg.n_hist();
        if eta.eta1.len() != n {
            return Err(Error::ConfigMismatch(format!(
                "history has {} samples, grid needs {n}",
                eta.eta1.len()
            )));
        }
        if !(eta.eta0 > 0.0) {
            return Err(Error::OutOfDomain);
        }
        let m = cfg.numerics.substeps;
        let origin = 2 * n * m;
        let mut half = Vec::with_capacity(origin + 1 + 2 * n * m);
        let node = |p: usize| if p < n { eta.eta1[p] } else { eta.eta0 };
        for j in 0..origin {
            let p = j / (2 * m);
            let w = (j % (2 * m)) as f64 / (2 * m) as f64;
            half.push(node(p) * (1.0 - w) + node(p + 1) * w);
        }
        half.push(eta.eta0);
        Ok(Self {
            r: cfg.r,
            f0: cfg.dynamics.f0.clone(),
            weights: cfg.kernel_weights(),
            mode: cfg.delay_mode,
            n_hist: n,
            m,
            dt: cfg.dt(),
            lag_cells: n * m,
            half,
            steps: 0,
            carry: None,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn time(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn current(&self) -> f64 {
        *self.half.last().expect("lattice is never empty")
    }

    fn origin(&self) -> usize {
        2 * self.lag_cells
    }

    #[inline]
    fn delayed(&self, j: usize, x: f64) -> f64 {
        match self.mode {
            DelayMode::Kernel => {
                let n = self.n_hist;
                let stride = 2 * self.m;
                let base = j - stride * n;
                let mut acc = self.weights[n] * x;
                for (i, w) in self.weights[..n].iter().enumerate() {
                    acc += w * self.half[base + stride * i];
                }
                acc
            }
            DelayMode::PointwiseMidpoint => self.half[j - self.lag_cells],
        }
    }

    #[inline]
    fn rhs(&self, j: usize, x: f64, c: f64) -> f64 {
        self.r * x + self.f0.eval(x, self.delayed(j, x)) - c
    }

    /// Advances one state step with consumption `c` held on the step.
    pub fn step(&mut self, c: f64) -> Result<f64> {
        let j = self.origin() + 2 * self.steps;
        let x = self.current();
        let h = self.dt;
        let k1 = match self.carry {
            Some((cc, d)) if cc == c => d,
            _ => self.rhs(j, x, c),
        };
        // the midpoint lattice slot is not filled yet, so stages read only
        // strictly delayed values plus the stage value itself
        let k2 = self.rhs(j + 1, x + 0.5 * h * k1, c);
        let k3 = self.rhs(j + 1, x + 0.5 * h * k2, c);
        let k4 = self.rhs(j + 2, x + h * k3, c);
        let x1 = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !x1.is_finite() {
            return Err(Error::NonFiniteState { t: self.time() + h });
        }
        self.half.push(f64::NAN);
        self.half.push(x1);
        let d1 = self.rhs(j + 2, x1, c);
        self.half[j + 1] = 0.5 * (x + x1) + h / 8.0 * (k1 - d1);
        self.carry = Some((c, d1));
        self.steps += 1;
        Ok(x1)
    }

    /// Current window `(x(t), x(t - T + i h))` as a history state.
    pub fn window_state(&self) -> HistoryState {
        let now = self.half.len() - 1;
        let stride = 2 * self.m;
        let base = now - stride * self.n_hist;
        HistoryState {
            eta0: self.current(),
            eta1: (0..self.n_hist).map(|i| self.half[base + stride * i]).collect(),
        }
    }

    /// Node values from `-T` to the current time.
    pub fn nodes(&self) -> Vec<f64> {
        self.half.iter().step_by(2).copied().collect()
    }
}

fn steps_for(horizon: f64, dt: f64) -> usize {
    ((horizon / dt) - 1e-9).ceil().max(1.0) as usize
}

pub(crate) fn finish(stepper: &DelayStepper, controls: Vec<f64>, eta0: f64) -> Trajectory {
    let values = stepper.nodes();
    let origin = stepper.lag_cells;
    let min_value = values[origin..].iter().copied().fold(f64::INFINITY, f64::min);
    Trajectory {
        dt: stepper.dt,
        start: -(origin as f64) * stepper.dt,
        values,
        controls,
        admissible: min_value > positivity_tolerance(eta0),
        min_value,
    }
}

/// Integrates on `[0, horizon]` (rounded up to the state grid).
pub fn integrate(
    cfg: &ProblemConfig,
    eta: &HistoryState,
    c: &ControlPath,
    horizon: f64,
) -> Result<Trajectory> {
    if !(horizon > 0.0) {
        return Err(Error::InvalidConfig(format!("horizon must be positive, got {horizon}")));
    }
    let mut stepper = DelayStepper::new(cfg, eta)?;
    let steps = steps_for(horizon, stepper.dt);
    let controls = c.per_state_step(stepper.dt, steps)?;
    for &ci in &controls {
        stepper.step(ci)?;
    }
    Ok(finish(&stepper, controls, eta.eta0))
}

/// Resumes integration from a snapshot, applying per-step `controls`.
pub fn integrate_from(
    stepper: &DelayStepper,
    prefix: &[f64],
    rest: &[f64],
    eta0: f64,
) -> Result<Trajectory> {
    debug_assert_eq!(prefix.len(), stepper.steps());
    let mut s = stepper.clone();
    for &ci in rest {
        s.step(ci)?;
    }
    let mut controls = prefix.to_vec();
    controls.extend_from_slice(rest);
    Ok(finish(&s, controls, eta0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TailPolicy {
    /// Integral on `[0, horizon]` only.
    None,
    /// Adds `e^{-rho H} (sup U1 + sup U2) / rho`.
    UpperBound,
    /// Continues with `c = 0` for `extra` more time, then adds the upper bound.
    ZeroControlContinuation { extra: f64 },
    /// Adds `e^{-rho H} (U1(0) + U2(x(H))) / rho`; a lower bound for the
    /// `c = 0` continuation when the state is nondecreasing after `H`.
    MonotoneFloor,
}

/// `(phi_a, phi_b)` with `int_0^dt e^{-rho s} (g_a (1 - s/dt) + g_b s/dt) ds
/// = dt (phi_a g_a + phi_b g_b)`, `u = rho dt`.
pub fn exp_trapezoid_weights(u: f64) -> (f64, f64) {
    let total = if u == 0.0 { 1.0 } else { -(-u).exp_m1() / u };
    let phi_b = if u < 0.1 {
        // sum_k (-u)^k (k + 1) / (k + 2)!
        let mut term = 0.5;
        let mut acc = 0.0;
        let mut fact = 2.0;
        for k in 0..12 {
            acc += term;
            fact *= (k + 3) as f64;
            term = (-u).powi(k as i32 + 1) * (k + 2) as f64 / fact;
        }
        acc
    } else {
        (1.0 - (1.0 + u) * (-u).exp()) / (u * u)
    };
    (total - phi_b, phi_b)
}

/// Discounted running payoff on the forward part of `traj`.
pub fn discounted_integral(cfg: &ProblemConfig, traj: &Trajectory) -> f64 {
    let dt = traj.dt;
    let xs = traj.forward();
    let u = cfg.rho * dt;
    let (wa, wb) = exp_trapezoid_weights(u);
    let step_mass = -(-u).exp_m1() / cfg.rho;
    let mut acc = 0.0;
    let mut u2_prev = cfg.u2.u(xs[0]);
    for n in 0..xs.len() - 1 {
        let disc = (-cfg.rho * n as f64 * dt).exp();
        let u2_next = cfg.u2.u(xs[n + 1]);
        let c = traj.controls.get(n).copied().unwrap_or(0.0);
        acc += disc * (cfg.u1.u(c) * step_mass + dt * (wa * u2_prev + wb * u2_next));
        u2_prev = u2_next;
    }
    acc
}

/// Discounted objective with a tail term.
pub fn objective(
    cfg: &ProblemConfig,
    eta: &HistoryState,
    c: &ControlPath,
    horizon: f64,
    tail: TailPolicy,
) -> Result<f64> {
    let traj = integrate(cfg, eta, c, horizon)?;
    objective_of(cfg, &traj, c, tail)
}

/// Same as [`objective`] for an already integrated trajectory.
pub fn objective_of(
    cfg: &ProblemConfig,
    traj: &Trajectory,
    c: &ControlPath,
    tail: TailPolicy,
) -> Result<f64> {
    let eta0 = traj.values[traj.origin()];
    let tol = positivity_tolerance(eta0);
    if let Some((i, v)) = traj.forward().iter().enumerate().find(|(_, v)| !(**v > tol)) {
        return Err(Error::Inadmissible { t: i as f64 * traj.dt, value: *v });
    }
    let horizon = traj.horizon();
    let running = discounted_integral(cfg, traj);
    let disc = (-cfg.rho * horizon).exp();
    let tail_term = match tail {
        TailPolicy::None => 0.0,
        TailPolicy::UpperBound => disc * cfg.payoff_bound(),
        TailPolicy::MonotoneFloor => {
            disc * (cfg.u1.u_at_zero() + cfg.u2.u(traj.final_value())) / cfg.rho
        }
        TailPolicy::ZeroControlContinuation { extra } => {
            let mut truncated = c.clone();
            let keep = ((horizon / c.dt) + 1e-9).floor() as usize;
            truncated.values.truncate(keep);
            let eta = HistoryState {
                eta0: traj.values[traj.origin()],
                eta1: history_samples(cfg, traj),
            };
            let long = integrate(cfg, &eta, &truncated, horizon + extra)?;
            let full = objective_of(cfg, &long, &truncated, TailPolicy::UpperBound)?;
            return Ok(full);
        }
    };
    Ok(running + tail_term)
}

fn history_samples(cfg: &ProblemConfig, traj: &Trajectory) -> Vec<f64> {
    let m = cfg.numerics.substeps;
    (0..cfg.n_hist()).map(|i| traj.values[i * m]).collect()
}

/// Evaluates several `(eta, c)` pairs, fanning out over `workers` threads.
pub fn objective_batch(
    cfg: &ProblemConfig,
    items: &[(HistoryState, ControlPath)],
    horizon: f64,
    tail: TailPolicy,
    workers: usize,
) -> Vec<Result<f64>> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(|(e, c)| objective(cfg, e, c, horizon, tail)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|(e, c)| objective(cfg, e, c, horizon, tail))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Whether `x(.; eta_a, c_a) <= x(.; eta_b, c_b)` on the grid, up to
/// `1e-8 (1 + max |x|)`.
pub fn comparison_check(
    cfg: &ProblemConfig,
    eta_a: &HistoryState,
    eta_b: &HistoryState,
    c_a: &ControlPath,
    c_b: &ControlPath,
    horizon: f64,
) -> bool {
    let (Ok(a), Ok(b)) = (
        integrate(cfg, eta_a, c_a, horizon),
        integrate(cfg, eta_b, c_b, horizon),
    ) else {
        return false;
    };
    let scale = a.values.iter().chain(&b.values).fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-8 * (1.0 + scale);
    a.values.iter().zip(&b.values).all(|(x, y)| *x <= y + tol)
}

/// Writes `t, x, c, discounted_utility_density` for `t >= 0`.
pub fn write_trajectory_csv<W: Write>(cfg: &ProblemConfig, traj: &Trajectory, mut out: W) -> Result<()> {
    writeln!(out, "t,x,c,discounted_utility_density")?;
    for (n, x) in traj.forward().iter().enumerate() {
        let t = n as f64 * traj.dt;
        let c = traj.controls.get(n).copied().unwrap_or(0.0);
        let density = (-cfg.rho * t).exp() * (cfg.u1.u(c) + cfg.u2.u(*x));
        writeln!(out, "{t},{x},{c},{density}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{preset, KernelShape, StateUtilitySpec};

    fn linear_cfg(shape: KernelShape, n_hist: usize, substeps: usize) -> ProblemConfig {
        let mut cfg = preset("zero-state-utility").unwrap();
        cfg.r = 0.0;
        cfg.dynamics.f0 = ProductionLaw::Linear { alpha: 0.0, beta: 1.0 };
        cfg.dynamics.lipschitz_const = 1.0;
        cfg.numerics.substeps = substeps;
        cfg.with_numerics(cfg.numerics).unwrap();
        let mut cfg = cfg.with_numerics(crate::model::Numerics { n_hist, substeps }).unwrap();
        cfg.kernel = crate::model::KernelSpec::new(shape, cfg.window, n_hist).unwrap();
        cfg
    }

    #[test]
    fn constant_history_unit_mass_grows_linearly() {
        let cfg = linear_cfg(KernelShape::Uniform, 64, 1);
        let eta = HistoryState::constant(1.0, 64);
        let traj = integrate(&cfg, &eta, &ControlPath::zero(cfg.dt()), cfg.dt()).unwrap();
        let dt = cfg.dt();
        assert!((traj.final_value() - (1.0 + dt)).abs() < dt * dt);
    }

    #[test]
    fn linear_uniform_case_self_converges() {
        // reference by Richardson over substep halving
        let run = |m: usize| {
            let cfg = linear_cfg(KernelShape::Uniform, 16, m);
            let eta = HistoryState::constant(1.0, 16);
            integrate(&cfg, &eta, &ControlPath::zero(cfg.dt()), 1.0).unwrap().final_value()
        };
        let (a, b, c) = (run(4), run(8), run(16));
        let reference = c + (c - b) / 15.0;
        assert!((b - c).abs() < 1e-8);
        assert!((a - reference).abs() / reference < 1e-6);
        // on [0, 1] the exact solution is 1 + sinh(t); the gap is the
        // trapezoid error of the 16-cell delay quadrature
        assert!((reference - (1.0 + 1f64.sinh())).abs() < 2e-3, "x(1) = {reference}");
    }

    #[test]
    fn observed_order_is_at_least_three_and_a_half() {
        let cfg0 = preset("saturating-production").unwrap();
        let run = |m: usize| {
            let cfg = cfg0.with_numerics(crate::model::Numerics { n_hist: 16, substeps: m }).unwrap();
            let eta = HistoryState::new(1.0, (0..16).map(|i| 0.5 + 0.03 * i as f64).collect());
            let c = ControlPath::constant(cfg0.window / 16.0, 0.1, 5.0);
            integrate(&cfg, &eta, &c, 3.0).unwrap().final_value()
        };
        let (a, b, c) = (run(1), run(2), run(4));
        let order = ((a - b) / (b - c)).abs().log2();
        assert!(order >= 3.5, "observed order {order}");
    }

    #[test]
    fn zero_control_is_nondecreasing() {
        let cfg = preset("zero-state-utility").unwrap();
        let eta = HistoryState::new(0.3, (0..64).map(|i| 0.1 + (i as f64 * 0.2).sin().abs()).collect());
        let traj = integrate(&cfg, &eta, &ControlPath::zero(cfg.dt()), 10.0).unwrap();
        assert!(traj.is_nondecreasing_from(0.0, 0.0));
        assert!(traj.admissible);
        assert_eq!(traj.min_value, 0.3);
    }

    #[test]
    fn history_is_reproduced() {
        let cfg = preset("saturating-production").unwrap();
        let eta = HistoryState::new(2.0, (0..64).map(|i| i as f64).collect());
        let traj = integrate(&cfg, &eta, &ControlPath::zero(cfg.dt()), 1.0).unwrap();
        assert_eq!(&traj.values[..64], &eta.eta1[..]);
        assert_eq!(traj.values[64], 2.0);
        assert_eq!(traj.start, -1.0);
    }

    #[test]
    fn zero_utilities_give_zero_objective() {
        let cfg = preset("zero-state-utility").unwrap();
        let eta = HistoryState::constant(1.0, 64);
        let j = objective(&cfg, &eta, &ControlPath::zero(cfg.dt()), 5.0, TailPolicy::None).unwrap();
        assert_eq!(j, 0.0);
    }

    #[test]
    fn constant_integrand_discounts_geometrically() {
        let cfg = preset("zero-state-utility").unwrap();
        let eta = HistoryState::constant(5.0, 64);
        let c = ControlPath::constant(cfg.dt(), 0.2, 10.0);
        let h = 4.0;
        let j = objective(&cfg, &eta, &c, h, TailPolicy::UpperBound).unwrap();
        let expected = cfg.u1.u(0.2) / cfg.rho * (1.0 - (-cfg.rho * h).exp())
            + (-cfg.rho * h).exp() * cfg.payoff_bound();
        assert!((j - expected).abs() < 1e-12, "{j} vs {expected}");
    }

    #[test]
    fn objective_self_converges() {
        let cfg0 = preset("saturating-production").unwrap();
        let run = |m: usize| {
            let cfg = cfg0.with_numerics(crate::model::Numerics { n_hist: 64, substeps: m }).unwrap();
            let eta = HistoryState::constant(1.0, 64);
            let c = ControlPath::constant(cfg0.h(), 0.1, 20.0);
            objective(&cfg, &eta, &c, 20.0, TailPolicy::None).unwrap()
        };
        let (b, c) = (run(2), run(4));
        let reference = c + (c - b) / 3.0;
        assert!((run(1) - reference).abs() < 1e-6);
    }

    #[test]
    fn inadmissible_objective_errors() {
        let cfg = preset("saturating-production").unwrap();
        let eta = HistoryState::constant(0.1, 64);
        let c = ControlPath::constant(cfg.dt(), 5.0, 5.0);
        let err = objective(&cfg, &eta, &c, 5.0, TailPolicy::None).unwrap_err();
        assert_eq!(err.kind(), "Inadmissible");
    }

    #[test]
    fn incommensurate_control_step_is_rejected() {
        let cfg = preset("saturating-production").unwrap();
        let eta = HistoryState::constant(1.0, 64);
        let c = ControlPath::constant(cfg.dt() * 1.5, 0.1, 1.0);
        assert_eq!(integrate(&cfg, &eta, &c, 1.0).unwrap_err().kind(), "ConfigMismatch");
    }

    #[test]
    fn comparison_basic_cases() {
        let cfg = preset("saturating-production").unwrap();
        let eta = HistoryState::constant(1.0, 64);
        let zero = ControlPath::zero(cfg.dt());
        let one = ControlPath::constant(cfg.dt(), 1.0, 3.0);
        assert!(comparison_check(&cfg, &eta, &eta, &zero, &zero, 3.0));
        assert!(comparison_check(&cfg, &eta, &eta, &one, &zero, 3.0));
        assert!(!comparison_check(&cfg, &eta, &eta, &zero, &one, 3.0));
    }

    #[test]
    fn continuation_tail_sits_between_floor_and_bound() {
        let cfg = preset("saturating-production").unwrap().with_state_utility(StateUtilitySpec::zero());
        let eta = HistoryState::constant(1.0, 64);
        let c = ControlPath::constant(cfg.dt(), 0.1, 3.0);
        let j = |t| objective(&cfg, &eta, &c, 3.0, t).unwrap();
        let floor = j(TailPolicy::MonotoneFloor);
        let cont = j(TailPolicy::ZeroControlContinuation { extra: 5.0 });
        let upper = j(TailPolicy::UpperBound);
        assert!(floor <= cont && cont <= upper, "{floor} {cont} {upper}");
    }

    #[test]
    fn stepper_window_matches_trajectory() {
        let cfg = preset("saturating-production").unwrap();
        let eta = HistoryState::constant(1.0, 64);
        let mut s = DelayStepper::new(&cfg, &eta).unwrap();
        for _ in 0..100 {
            s.step(0.05).unwrap();
        }
        let w = s.window_state();
        let traj = integrate(&cfg, &eta, &ControlPath::constant(cfg.dt(), 0.05, 100.0 * cfg.dt()), 100.0 * cfg.dt()).unwrap();
        assert_eq!(w.eta0, traj.final_value());
        assert_eq!(w.eta1[0], traj.values[100]);
    }

    #[test]
    fn exp_weights_match_quadrature() {
        for u in [0.0, 1e-6, 0.01, 0.09, 0.11, 1.0, 5.0] {
            let (wa, wb) = exp_trapezoid_weights(u);
            let n = 20000;
            let (mut qa, mut qb) = (0.0, 0.0);
            for i in 0..n {
                let s = (i as f64 + 0.5) / n as f64;
                let e = (-u * s).exp() / n as f64;
                qa += e * (1.0 - s);
                qb += e * s;
            }
            assert!((wa - qa).abs() < 1e-8 && (wb - qb).abs() < 1e-8, "u = {u}");
        }
    }
}
