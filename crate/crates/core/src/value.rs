//! Value function estimates by direct transcription.
//!
//! Consumption is `kappa_i x` on piece `i` of a geometric knot schedule
//! over `[0, M]` and zero afterwards. Working with rates instead of levels
//! keeps the state positive and avoids the extreme sensitivity of open-loop
//! levels on long unstable horizons. The log-rates are optimized by BFGS
//! with finite-difference gradients. Kinked state utilities are replaced by
//! a softmin of width `tau`, continued down to `smoothing_floor`; the loss
//! is at most `tau ln 2 int e^{-rho t} dt`.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approx::epsilon_truncation_time;
use crate::dynamics::{exp_trapezoid_weights, integrate, positivity_tolerance, ControlPath, DelayStepper};
use crate::error::{Error, Result};
use crate::hilbert::{minus_one_norm, HilbertPoint};
use crate::model::{HistoryState, ProblemConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueOptions {
    /// Truncation time `M`; defaults to the `eps` truncation time (at least `T`).
    pub horizon: Option<f64>,
    pub eps: f64,
    pub knots: usize,
    /// Ratio of consecutive knot gaps.
    pub ratio: f64,
    /// BFGS iterations per smoothing stage.
    pub max_iters: usize,
    /// Initial rates (same schedule).
    pub warm_start: Option<Vec<f64>>,
    /// Smoothing width of the last stage for kinked state utilities.
    pub smoothing_floor: f64,
}

impl Default for ValueOptions {
    fn default() -> Self {
        Self {
            horizon: None,
            eps: 1e-6,
            knots: 32,
            ratio: 1.1,
            max_iters: 400,
            warm_start: None,
            smoothing_floor: 1e-7,
        }
    }
}

impl ValueOptions {
    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = Some(horizon);
        self
    }

    pub fn with_knots(mut self, knots: usize) -> Self {
        self.knots = knots;
        self
    }

    pub fn with_smoothing(mut self, tau: f64) -> Self {
        self.smoothing_floor = tau;
        self
    }

    pub fn with_warm_start(mut self, values: Vec<f64>) -> Self {
        self.warm_start = Some(values);
        self
    }

    pub fn resolve_horizon(&self, cfg: &ProblemConfig) -> Result<f64> {
        match self.horizon {
            Some(h) if h > 0.0 => Ok(h),
            Some(h) => Err(Error::InvalidConfig(format!("horizon must be positive, got {h}"))),
            None => Ok(epsilon_truncation_time(cfg.rho, cfg.u1.u_sup, cfg.u1.u_at_zero(), self.eps)?
                .max(cfg.window)),
        }
    }
}

/// Piece boundaries (state-step indices) of a piecewise-constant control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnotSchedule {
    pub dt: f64,
    pub breaks: Vec<usize>,
}

impl KnotSchedule {
    /// `tau_j = M (q^j - 1) / (q^K - 1)` rounded to the grid, duplicates dropped.
    pub fn geometric(dt: f64, horizon: f64, knots: usize, ratio: f64) -> Self {
        let steps = ((horizon / dt) - 1e-9).ceil().max(1.0) as usize;
        let k = knots.max(1);
        let mut breaks = vec![0usize];
        for j in 1..=k {
            let frac = if (ratio - 1.0).abs() < 1e-12 {
                j as f64 / k as f64
            } else {
                (ratio.powi(j as i32) - 1.0) / (ratio.powi(k as i32) - 1.0)
            };
            let b = ((frac * steps as f64).round() as usize).min(steps);
            if b > *breaks.last().unwrap() {
                breaks.push(b);
            }
        }
        if *breaks.last().unwrap() != steps {
            breaks.push(steps);
        }
        Self { dt, breaks }
    }

    pub fn pieces(&self) -> usize {
        self.breaks.len() - 1
    }

    pub fn steps(&self) -> usize {
        *self.breaks.last().unwrap()
    }

    pub fn horizon(&self) -> f64 {
        self.steps() as f64 * self.dt
    }

    pub fn knot_times(&self) -> Vec<f64> {
        self.breaks.iter().map(|b| *b as f64 * self.dt).collect()
    }

    /// One value per state step.
    pub fn expand(&self, values: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.steps());
        for (i, w) in self.breaks.windows(2).enumerate() {
            out.extend(std::iter::repeat(values[i]).take(w[1] - w[0]));
        }
        out
    }

    pub fn to_path(&self, values: &[f64]) -> ControlPath {
        ControlPath { dt: self.dt, values: self.expand(values) }
    }

    /// Piece index containing state step `n`, if any.
    pub fn piece_of(&self, n: usize) -> Option<usize> {
        if n >= self.steps() {
            return None;
        }
        Some(self.breaks.partition_point(|b| *b <= n) - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub value: f64,
    /// Payoff with the smoothed state utility of the last stage; this is
    /// what `V_{eta0}` differentiates.
    pub smoothed_value: f64,
    pub v_eta0: Option<f64>,
    pub horizon: f64,
    /// Certified bound on what the zero-control continuation after `M` can miss.
    pub tail_gap: f64,
    pub solver_iters: usize,
    /// Norm of the final projected gradient.
    pub bellman_residual: f64,
    /// Predicted remaining gain of the last quasi-Newton step.
    pub optimizer_gap: f64,
    /// Loss bound due to the smoothing of the last stage.
    pub relaxation_gap: f64,
    pub schedule: KnotSchedule,
    /// Consumption rate `c / x` on each piece.
    pub rates: Vec<f64>,
    /// Realized control on each state step.
    pub controls: Vec<f64>,
    pub final_state: f64,
    pub converged: bool,
}

impl ValueEstimate {
    /// Numerical tolerance of `value` as an estimate of the truncated problem.
    pub fn tolerance(&self) -> f64 {
        if self.value == f64::NEG_INFINITY {
            return 0.0;
        }
        self.optimizer_gap + self.relaxation_gap + 1e-8 * (1.0 + self.value.abs())
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }

    pub fn control_path(&self) -> ControlPath {
        ControlPath { dt: self.schedule.dt, values: self.controls.clone() }
    }

    fn infeasible(horizon: f64, schedule: KnotSchedule) -> Self {
        let pieces = schedule.pieces();
        Self {
            value: f64::NEG_INFINITY,
            smoothed_value: f64::NEG_INFINITY,
            v_eta0: None,
            horizon,
            tail_gap: 0.0,
            solver_iters: 0,
            bellman_residual: 0.0,
            optimizer_gap: 0.0,
            relaxation_gap: 0.0,
            rates: vec![0.0; pieces],
            controls: vec![0.0; schedule.steps()],
            schedule,
            final_state: f64::NAN,
            converged: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Eval {
    u1_part: f64,
    /// Running `U2` payoff plus the zero-control floor after `M`.
    s_part: f64,
    /// Same with the smoothed `U2`.
    s_smooth: f64,
    x_end: f64,
}

impl Eval {
    fn j(&self) -> f64 {
        self.u1_part + self.s_part
    }

    fn phi(&self) -> f64 {
        self.u1_part + self.s_smooth
    }
}

/// Payoff of piecewise-constant consumption rates on a fixed schedule.
///
/// On piece `i` the control over each state step is `kappa_i` times the
/// state at the start of the step.
pub struct PayoffModel<'a> {
    cfg: &'a ProblemConfig,
    base: DelayStepper,
    pub schedule: KnotSchedule,
    step_mass: f64,
    wa: f64,
    wb: f64,
    decay: f64,
    tol: f64,
    eta0: f64,
}

impl<'a> PayoffModel<'a> {
    pub fn new(cfg: &'a ProblemConfig, eta: &HistoryState, schedule: KnotSchedule) -> Result<Self> {
        let base = DelayStepper::new(cfg, eta)?;
        let u = cfg.rho * cfg.dt();
        let (wa, wb) = exp_trapezoid_weights(u);
        Ok(Self {
            cfg,
            base,
            schedule,
            step_mass: -(-u).exp_m1() / cfg.rho,
            wa,
            wb,
            decay: (-u).exp(),
            tol: positivity_tolerance(eta.eta0),
            eta0: eta.eta0,
        })
    }

    fn simulate(&self, kappa: &[f64], tau: f64, mut record: impl FnMut(f64)) -> Option<Eval> {
        let cfg = self.cfg;
        let dt = cfg.dt();
        let smooth = tau > 0.0 && cfg.u2.has_kink();
        let mut s = self.base.clone();
        let mut x_prev = self.eta0;
        let mut u2_prev = cfg.u2.u(x_prev);
        let mut v2_prev = if smooth { cfg.u2.u_smooth(x_prev, tau) } else { u2_prev };
        let mut disc = 1.0;
        let (mut u1_acc, mut s_acc, mut v_acc) = (0.0, 0.0, 0.0);
        for (i, w) in self.schedule.breaks.windows(2).enumerate() {
            for _ in w[0]..w[1] {
                let c = kappa[i] * x_prev;
                record(c);
                u1_acc += disc * self.step_mass * cfg.u1.u(c);
                let x = s.step(c).ok()?;
                if !(x > self.tol) {
                    return None;
                }
                let u2 = cfg.u2.u(x);
                let v2 = if smooth { cfg.u2.u_smooth(x, tau) } else { u2 };
                s_acc += disc * dt * (self.wa * u2_prev + self.wb * u2);
                v_acc += disc * dt * (self.wa * v2_prev + self.wb * v2);
                disc *= self.decay;
                x_prev = x;
                u2_prev = u2;
                v2_prev = v2;
            }
        }
        let floor = disc * (cfg.u1.u_at_zero() + u2_prev) / cfg.rho;
        let floor_smooth = disc * (cfg.u1.u_at_zero() + v2_prev) / cfg.rho;
        Some(Eval {
            u1_part: u1_acc,
            s_part: s_acc + floor,
            s_smooth: v_acc + floor_smooth,
            x_end: x_prev,
        })
    }

    fn run(&self, kappa: &[f64], tau: f64) -> Option<Eval> {
        self.simulate(kappa, tau, |_| {})
    }

    /// Discretized payoff `J_M` with the zero-control floor after `M`;
    /// `None` when the state leaves the positive half-line.
    pub fn payoff(&self, kappa: &[f64]) -> Option<f64> {
        self.run(kappa, 0.0).map(|e| e.j())
    }

    /// Control applied on each state step.
    pub fn realize(&self, kappa: &[f64]) -> Option<Vec<f64>> {
        let mut out = Vec::with_capacity(self.schedule.steps());
        self.simulate(kappa, 0.0, |c| out.push(c))?;
        Some(out)
    }

    /// Loss bound of optimizing the smoothed payoff instead of `J`.
    fn relaxation_gap(&self, tau: f64) -> f64 {
        if !(tau > 0.0 && self.cfg.u2.has_kink()) {
            return 0.0;
        }
        let rho = self.cfg.rho;
        let mass = -(-rho * self.schedule.horizon()).exp_m1() / rho;
        let tail = (-rho * self.schedule.horizon()).exp() / rho;
        tau * std::f64::consts::LN_2 * (mass + tail)
    }

    /// Ascent gradient and diagonal curvature of the smoothed payoff in
    /// `theta = ln kappa`.
    fn gradient(&self, theta: &[f64], e0: &Eval, tau: f64) -> (Vec<f64>, Vec<f64>) {
        let phi0 = e0.phi();
        let k = theta.len();
        let mut g = vec![0.0; k];
        let mut d = vec![0.0; k];
        let mut probe: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
        // a step wider than the smoothing width straddles the kink
        let step = tau.clamp(1e-7, 1e-4);
        for i in 0..k {
            // One central difference usually suffices in log-rates; if a
            // probe is infeasible, shrink until two successive quotients agree.
            probe[i] = (theta[i] + step).exp();
            let plus = self.run(&probe, tau);
            probe[i] = (theta[i] - step).exp();
            let minus = self.run(&probe, tau);
            probe[i] = theta[i].exp();
            if let (Some(p), Some(m)) = (plus, minus) {
                let (sp, sm) = (p.phi(), m.phi());
                g[i] = (sp - sm) / (2.0 * step);
                d[i] = (sp - 2.0 * phi0 + sm) / (step * step);
                continue;
            }
            let mut delta = 1e-5;
            let mut prev: Option<f64> = None;
            for _ in 0..40 {
                probe[i] = (theta[i] + delta).exp();
                let plus = self.run(&probe, tau);
                probe[i] = (theta[i] - delta).exp();
                let minus = self.run(&probe, tau);
                probe[i] = theta[i].exp();
                let quotient = plus.zip(minus).map(|(p, m)| {
                    let (sp, sm) = (p.phi(), m.phi());
                    ((sp - sm) / (2.0 * delta), (sp - 2.0 * phi0 + sm) / (delta * delta))
                });
                delta *= 0.25;
                let Some(q) = quotient else {
                    prev = None;
                    continue;
                };
                (g[i], d[i]) = q;
                if let Some(g_prev) = prev {
                    if (q.0 - g_prev).abs() <= 1e-4 * q.0.abs() + 1e-14 {
                        break;
                    }
                }
                prev = Some(q.0);
            }
        }
        (g, d)
    }
}

struct StageResult {
    theta: Vec<f64>,
    eval: Eval,
    iters: usize,
    predicted_gain: f64,
    grad_norm: f64,
}

// Rates stay at or above this floor so that the log-parametrization exists.
const RATE_FLOOR: f64 = 1e-12;

/// BFGS ascent on the smoothed payoff in log-rates.
fn bfgs_stage(model: &PayoffModel<'_>, mut theta: Vec<f64>, mut e: Eval, tau: f64, max_iters: usize, tol: f64) -> StageResult {
    let k = theta.len();
    let (mut g, d) = model.gradient(&theta, &e, tau);
    let diag_inverse = |g: &[f64], d: &[f64]| -> Vec<Vec<f64>> {
        let mut b = vec![vec![0.0; k]; k];
        for i in 0..k {
            // fall back to a unit-gain step where the curvature is not negative
            let curv = if d[i] < 0.0 { -d[i] } else { g[i].abs().max(1e-12) };
            b[i][i] = 1.0 / curv;
        }
        b
    };
    let mut b = diag_inverse(&g, &d);
    let mut predicted = f64::INFINITY;
    let mut iters = 0;
    let mut stalls = 0;
    while iters < max_iters {
        iters += 1;
        let mut p: Vec<f64> = (0..k).map(|i| (0..k).map(|j| b[i][j] * g[j]).sum()).collect();
        predicted = 0.5 * p.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
        if !(predicted > 0.0) {
            let (_, d) = model.gradient(&theta, &e, tau);
            b = diag_inverse(&g, &d);
            p = (0..k).map(|i| b[i][i] * g[i]).collect();
            predicted = 0.5 * p.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
        }
        if predicted <= tol {
            break;
        }
        // rates change by at most a factor e per step
        let scale = p.iter().map(|v| v.abs()).fold(1.0f64, f64::max);
        for pi in &mut p {
            *pi /= scale;
        }
        let phi0 = e.phi();
        let lin: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = theta.iter().zip(&p).map(|(t, pi)| t + alpha * pi).collect();
            let kappa: Vec<f64> = trial.iter().map(|t| t.exp()).collect();
            if let Some(et) = model.run(&kappa, tau) {
                if et.phi() >= phi0 + 1e-4 * alpha * lin {
                    accepted = Some((trial, et));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((theta_new, e_new)) = accepted else {
            stalls += 1;
            if stalls > 2 {
                break;
            }
            let (_, d) = model.gradient(&theta, &e, tau);
            b = diag_inverse(&g, &d);
            continue;
        };
        let gain = e_new.phi() - phi0;
        let (g_new, _) = model.gradient(&theta_new, &e_new, tau);
        let s: Vec<f64> = theta_new.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g.iter().zip(&g_new).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let yy: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ss: f64 = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        if sy > 1e-12 * yy * ss {
            let by: Vec<f64> = (0..k).map(|i| (0..k).map(|j| b[i][j] * y[j]).sum()).collect();
            let yby: f64 = y.iter().zip(&by).map(|(a, b)| a * b).sum();
            let r = 1.0 / sy;
            for i in 0..k {
                for j in 0..k {
                    b[i][j] += (1.0 + yby * r) * r * s[i] * s[j] - r * (by[i] * s[j] + s[i] * by[j]);
                }
            }
        }
        theta = theta_new;
        e = e_new;
        g = g_new;
        if gain.abs() <= 1e-3 * tol {
            stalls += 1;
            if stalls > 3 {
                break;
            }
        } else {
            stalls = 0;
        }
    }
    let grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    StageResult { theta, eval: e, iters, predicted_gain: predicted.max(0.0), grad_norm }
}

/// Estimates `V(eta)` on the truncated horizon; `-inf` when even zero
/// consumption drives the state out of the positive half-line.
pub fn estimate_value(cfg: &ProblemConfig, eta: &HistoryState, opts: &ValueOptions) -> Result<ValueEstimate> {
    let horizon = opts.resolve_horizon(cfg)?;
    let schedule = KnotSchedule::geometric(cfg.dt(), horizon, opts.knots, opts.ratio);
    let pieces = schedule.pieces();
    let model = PayoffModel::new(cfg, eta, schedule.clone())?;
    if model.run(&vec![0.0; pieces], 0.0).is_none() {
        return Ok(ValueEstimate::infeasible(horizon, schedule));
    }

    let mut kappa: Vec<f64> = match &opts.warm_start {
        Some(w) if w.len() == pieces => w.iter().map(|v| v.max(RATE_FLOOR)).collect(),
        _ => vec![cfg.rho; pieces],
    };
    let mut tau = if opts.warm_start.is_some() { opts.smoothing_floor } else { 1e-2_f64.max(opts.smoothing_floor) };
    let mut eval = None;
    for _ in 0..60 {
        if let Some(e) = model.run(&kappa, tau) {
            eval = Some(e);
            break;
        }
        for v in kappa.iter_mut() {
            *v = (*v * 0.5).max(RATE_FLOOR);
        }
    }
    let Some(mut e) = eval else {
        return Err(Error::Inadmissible { t: 0.0, value: eta.eta0 });
    };

    let mut theta: Vec<f64> = kappa.iter().map(|v| v.ln()).collect();
    let mut iters = 0;
    let mut last;
    loop {
        let final_stage = tau <= opts.smoothing_floor * (1.0 + 1e-9);
        let tol = if final_stage { 1e-3 } else { 1.0 } * opts.eps * (1.0 + e.j().abs());
        last = bfgs_stage(&model, theta, e, tau, opts.max_iters, tol);
        iters += last.iters;
        theta = last.theta.clone();
        if final_stage {
            e = last.eval;
            break;
        }
        tau = (tau * 0.1).max(opts.smoothing_floor);
        // the stage objective changed; re-evaluate at the carried point
        let kappa: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
        e = model.run(&kappa, tau).expect("stage iterate stays admissible");
    }
    let converged = last.predicted_gain <= opts.eps * (1.0 + e.j().abs());
    if !converged && last.iters >= opts.max_iters {
        return Err(Error::NoConvergence { iterations: iters, residual: last.predicted_gain });
    }
    let rates: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
    let controls = model.realize(&rates).expect("final iterate is admissible");
    let disc = (-cfg.rho * schedule.horizon()).exp();
    let tail_gap = disc
        * (cfg.u1.u_sup - cfg.u1.u_at_zero() + cfg.u2.u_sup - cfg.u2.u(e.x_end)).max(0.0)
        / cfg.rho;
    Ok(ValueEstimate {
        value: e.j(),
        smoothed_value: e.phi(),
        v_eta0: None,
        horizon: schedule.horizon(),
        tail_gap,
        solver_iters: iters,
        bellman_residual: last.grad_norm,
        optimizer_gap: last.predicted_gain,
        relaxation_gap: model.relaxation_gap(tau),
        schedule,
        rates,
        controls,
        final_state: e.x_end,
        converged,
    })
}

/// Default finite-difference step for `V_{eta0}`.
pub fn default_eta0_step(eta0: f64) -> f64 {
    1e-3 * (1.0 + eta0.abs())
}

/// Central difference of `V` along `(1, 0)`, warm-started from `base`.
/// The step is halved while `eta0 - h` leaves the domain.
pub fn partial_eta0(
    cfg: &ProblemConfig,
    eta: &HistoryState,
    h: Option<f64>,
    opts: &ValueOptions,
    base: Option<&ValueEstimate>,
) -> Result<f64> {
    let owned;
    let base = match base {
        Some(b) => b,
        None => {
            owned = estimate_value(cfg, eta, opts)?;
            &owned
        }
    };
    if !base.is_finite() {
        return Err(Error::OutOfDomain);
    }
    let warm = opts.clone().with_horizon(base.horizon).with_warm_start(base.rates.clone());
    let mut h = h.unwrap_or_else(|| default_eta0_step(eta.eta0)).min(0.5 * eta.eta0);
    for _ in 0..30 {
        let lo = estimate_value(cfg, &eta.shifted(-h), &warm)?;
        if lo.is_finite() {
            let hi = estimate_value(cfg, &eta.shifted(h), &warm)?;
            let slope = (hi.smoothed_value - lo.smoothed_value) / (2.0 * h);
            if !(slope > 0.0) {
                return Err(Error::GradientFailure(format!("V_eta0 = {slope} is not positive")));
            }
            return Ok(slope);
        }
        h *= 0.5;
    }
    Err(Error::OutOfDomain)
}

/// One-sided slopes `(forward, central, backward)` at `eta` with step `h`.
pub fn eta0_slopes(
    cfg: &ProblemConfig,
    eta: &HistoryState,
    h: f64,
    opts: &ValueOptions,
    base: &ValueEstimate,
) -> Result<(f64, f64, f64)> {
    let warm = opts.clone().with_horizon(base.horizon).with_warm_start(base.rates.clone());
    let hi = estimate_value(cfg, &eta.shifted(h), &warm)?.smoothed_value;
    let lo = estimate_value(cfg, &eta.shifted(-h), &warm)?.smoothed_value;
    Ok(((hi - base.smoothed_value) / h, (hi - lo) / (2.0 * h), (base.smoothed_value - lo) / h))
}

// ---------------------------------------------------------------------------
// Domain probe and scans
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DomainProbe {
    pub g_value: f64,
    pub in_domain: bool,
}

/// Minimum of the zero-control trajectory over `[0, T]`.
pub fn domain_probe(cfg: &ProblemConfig, eta: &HistoryState) -> Result<DomainProbe> {
    let traj = integrate(cfg, eta, &ControlPath::zero(cfg.dt()), cfg.window)?;
    let g_value = traj.min_value;
    Ok(DomainProbe { g_value, in_domain: g_value > positivity_tolerance(eta.eta0) })
}

/// Concurrent memo of value estimates keyed by configuration hash and a
/// quantized state.
#[derive(Default)]
pub struct ValueCache {
    map: Mutex<HashMap<(String, Vec<i64>), ValueEstimate>>,
}

impl ValueCache {
    pub fn key(cfg_hash: &str, eta: &HistoryState) -> (String, Vec<i64>) {
        let q = |v: f64| (v * 1e12).round() as i64;
        let mut k = vec![q(eta.eta0)];
        k.extend(eta.eta1.iter().map(|v| q(*v)));
        (cfg_hash.to_string(), k)
    }

    pub fn get_or_insert_with(
        &self,
        cfg_hash: &str,
        eta: &HistoryState,
        compute: impl FnOnce() -> Result<ValueEstimate>,
    ) -> Result<ValueEstimate> {
        let key = Self::key(cfg_hash, eta);
        if let Some(v) = self.map.lock().expect("cache poisoned").get(&key) {
            return Ok(v.clone());
        }
        let v = compute()?;
        self.map.lock().expect("cache poisoned").entry(key).or_insert_with(|| v.clone());
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Smooth positive history `a + b sin(w s)` with `a > |b|`.
pub fn random_history(rng: &mut impl Rng, n_hist: usize, window: f64) -> HistoryState {
    let a = rng.gen_range(0.6..2.5);
    let b = rng.gen_range(-0.5..0.5);
    let w = rng.gen_range(0.5..6.0);
    let eta1 = (0..n_hist)
        .map(|i| a + b * (w * (-window + i as f64 * window / n_hist as f64)).sin())
        .collect();
    HistoryState { eta0: rng.gen_range(0.6..2.5), eta1 }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct PropertyReport {
    pub midpoint_checks: usize,
    pub midpoint_violations: usize,
    pub monotone_checks: usize,
    pub monotone_violations: usize,
    pub bound_checks: usize,
    pub bound_violations: usize,
    /// Largest `|V(p) - V(q)| / ||p - q||_{-1}` seen on nearby pairs (skipped when `r = 0`).
    pub continuity_modulus: Option<f64>,
    /// Largest estimator tolerance seen.
    pub tolerance: f64,
    /// `(kind, lhs, rhs, slack)` per check.
    pub rows: Vec<(String, f64, f64, f64)>,
}

impl PropertyReport {
    pub fn violations(&self) -> usize {
        self.midpoint_violations + self.monotone_violations + self.bound_violations
    }
}

/// Concavity, monotonicity and bound checks on `n_samples` random states.
pub fn property_scan(cfg: &ProblemConfig, n_samples: usize, seed: u64, opts: &ValueOptions) -> Result<PropertyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = PropertyReport::default();
    let bound = cfg.payoff_bound();
    for _ in 0..n_samples {
        let p = random_history(&mut rng, cfg.n_hist(), cfg.window);
        let q = random_history(&mut rng, cfg.n_hist(), cfg.window);
        let vp = estimate_value(cfg, &p, opts)?;
        let vq = estimate_value(cfg, &q, opts)?;
        let mid = p.midpoint(&q);
        let warm: Vec<f64> = vp.rates.iter().zip(&vq.rates).map(|(a, b)| 0.5 * (a + b)).collect();
        let vm = estimate_value(cfg, &mid, &opts.clone().with_warm_start(warm))?;
        let tol = 2.0 * vp.tolerance().max(vq.tolerance()).max(vm.tolerance());
        report.tolerance = report.tolerance.max(tol / 2.0);
        let avg = 0.5 * (vp.value + vq.value);
        report.midpoint_checks += 1;
        if vm.value < avg - tol {
            report.midpoint_violations += 1;
        }
        report.rows.push(("midpoint".into(), vm.value, avg, vm.value - avg + tol));

        let up = estimate_value(cfg, &p.shifted(0.5), &opts.clone().with_warm_start(vp.rates.clone()))?;
        report.monotone_checks += 1;
        let tol = 2.0 * vp.tolerance().max(up.tolerance());
        if !(up.value > vp.value - tol) {
            report.monotone_violations += 1;
        }
        report.rows.push(("monotone".into(), up.value, vp.value, up.value - vp.value));

        for v in [&vp, &vq, &vm, &up] {
            report.bound_checks += 1;
            if !(v.value < bound) {
                report.bound_violations += 1;
            }
        }

        if cfg.r != 0.0 {
            let near = p.midpoint(&mid).midpoint(&p);
            let vn = estimate_value(cfg, &near, &opts.clone().with_warm_start(vp.rates.clone()))?;
            let d = minus_one_norm(cfg, &HilbertPoint::from(&near).sub(&HilbertPoint::from(&p)))?;
            if d > 0.0 {
                let ratio = (vn.value - vp.value).abs() / d;
                report.continuity_modulus = Some(report.continuity_modulus.unwrap_or(0.0).max(ratio));
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct BlowupRow {
    pub eta0: f64,
    pub value: f64,
    pub v_eta0: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BlowupTable {
    /// Domain boundary `inf { eta0 : g(eta0, eta1) > 0 }` located by bisection.
    pub boundary: f64,
    pub rows: Vec<BlowupRow>,
}

impl BlowupTable {
    pub fn growth(&self) -> f64 {
        match (self.rows.first(), self.rows.last()) {
            (Some(a), Some(b)) => b.v_eta0 / a.v_eta0,
            _ => f64::NAN,
        }
    }
}

/// Locates the boundary of the domain along `eta0` for fixed history.
pub fn domain_boundary(cfg: &ProblemConfig, eta1: &[f64]) -> Result<f64> {
    let inside = |x0: f64| -> Result<bool> {
        if x0 <= 0.0 {
            return Ok(false);
        }
        Ok(domain_probe(cfg, &HistoryState::new(x0, eta1.to_vec()))?.in_domain)
    };
    let mut hi = 1.0;
    while !inside(hi)? {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::OutOfDomain);
        }
    }
    let mut lo = 0.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if inside(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Walks `eta0 = b + d 2^{-j}` toward the boundary `b`, recording `V` and `V_{eta0}`.
pub fn boundary_blowup_scan(
    cfg: &ProblemConfig,
    eta1: &[f64],
    start_offset: f64,
    steps: usize,
    opts: &ValueOptions,
) -> Result<BlowupTable> {
    let boundary = domain_boundary(cfg, eta1)?;
    let mut rows = Vec::with_capacity(steps);
    let mut warm: Option<Vec<f64>> = None;
    let horizon = opts.resolve_horizon(cfg)?;
    for j in 0..steps {
        let offset = start_offset * 0.5f64.powi(j as i32);
        let eta = HistoryState::new(boundary + offset, eta1.to_vec());
        let mut o = opts.clone().with_horizon(horizon);
        if let Some(w) = &warm {
            o = o.with_warm_start(w.iter().map(|v| 0.5 * v).collect());
        }
        let v = estimate_value(cfg, &eta, &o)?;
        let slope = partial_eta0(cfg, &eta, Some(0.25 * offset.min(default_eta0_step(eta.eta0) * 4.0)), &o, Some(&v))?;
        warm = Some(v.rates.clone());
        rows.push(BlowupRow { eta0: eta.eta0, value: v.value, v_eta0: slope });
    }
    Ok(BlowupTable { boundary, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{preset, Numerics, ProductionLaw, StateUtilitySpec};

    fn small(name: &str, n_hist: usize) -> ProblemConfig {
        preset(name).unwrap().with_numerics(Numerics { n_hist, substeps: 1 }).unwrap()
    }

    #[test]
    fn geometric_schedule_is_dense_early() {
        let s = KnotSchedule::geometric(1.0 / 64.0, 14.0, 32, 1.1);
        assert_eq!(s.breaks[0], 0);
        assert_eq!(s.steps(), 896);
        assert!(s.breaks.windows(2).all(|w| w[1] > w[0]));
        assert!(s.breaks[1] - s.breaks[0] < s.breaks[s.pieces()] - s.breaks[s.pieces() - 1]);
        assert_eq!(s.expand(&vec![1.0; s.pieces()]).len(), 896);
        assert_eq!(s.piece_of(0), Some(0));
        assert_eq!(s.piece_of(895), Some(s.pieces() - 1));
        assert_eq!(s.piece_of(896), None);
    }

    #[test]
    fn matches_exhaustive_grid_on_two_knots() {
        let cfg = small("strong-blowup", 16);
        let eta = HistoryState::constant(1.0, 16);
        let opts = ValueOptions::default().with_horizon(4.0).with_knots(2);
        let est = estimate_value(&cfg, &eta, &opts).unwrap();
        let model = PayoffModel::new(&cfg, &eta, est.schedule.clone()).unwrap();
        assert_eq!(est.schedule.pieces(), 2);
        // coarse grid over the rates, then zoom in around the best cell
        let mut center = [0.5, 0.5];
        let mut half = 0.5;
        let mut best = f64::NEG_INFINITY;
        for _ in 0..8 {
            let mut arg = center;
            for a in 0..=20 {
                for b in 0..=20 {
                    let k = [
                        (center[0] - half + 2.0 * half * a as f64 / 20.0).max(0.0),
                        (center[1] - half + 2.0 * half * b as f64 / 20.0).max(0.0),
                    ];
                    if let Some(j) = model.payoff(&k) {
                        if j > best {
                            best = j;
                            arg = k;
                        }
                    }
                }
            }
            center = arg;
            half *= 0.25;
        }
        assert!(est.value >= best - 1e-7, "{} < {best}", est.value);
        assert!(est.value - best < 1e-6, "{} vs {best}", est.value);
    }

    #[test]
    fn value_vanishes_with_the_stock() {
        let mut cfg = small("zero-state-utility", 16);
        cfg.dynamics.f0 = ProductionLaw::Linear { alpha: 0.0, beta: 0.0 };
        let opts = ValueOptions::default().with_horizon(6.0).with_knots(8);
        let vals: Vec<f64> = [1e-2, 1e-4, 1e-6]
            .iter()
            .map(|x| estimate_value(&cfg, &HistoryState::constant(*x, 16), &opts).unwrap().value)
            .collect();
        assert!(vals[0] > vals[1] && vals[1] > vals[2]);
        assert!(vals[2] >= 0.0 && vals[2] < 1e-2, "{vals:?}");
    }

    #[test]
    fn values_stay_below_the_payoff_bound() {
        for name in crate::model::PRESET_NAMES {
            let cfg = small(name, 16);
            let est = estimate_value(&cfg, &HistoryState::constant(1.5, 16), &ValueOptions::default().with_knots(12)).unwrap();
            assert!(est.value < cfg.payoff_bound(), "{name}");
            assert!(est.converged, "{name}: gap {}", est.optimizer_gap);
        }
    }

    #[test]
    fn infeasible_state_has_minus_infinity() {
        let mut cfg = small("zero-state-utility", 16);
        cfg.dynamics.f0 = ProductionLaw::Linear { alpha: 0.0, beta: 1.0 };
        let eta = HistoryState::new(0.1, vec![-10.0; 16]);
        let probe = domain_probe(&cfg, &eta).unwrap();
        assert!(!probe.in_domain);
        let est = estimate_value(&cfg, &eta, &ValueOptions::default().with_knots(4)).unwrap();
        assert_eq!(est.value, f64::NEG_INFINITY);
    }

    #[test]
    fn probe_is_at_least_eta0_for_nonnegative_data() {
        let cfg = small("saturating-production", 16);
        let eta = HistoryState::new(0.4, vec![0.0; 16]);
        let probe = domain_probe(&cfg, &eta).unwrap();
        assert!(probe.in_domain && probe.g_value >= 0.4);
    }

    #[test]
    fn one_sided_slopes_are_ordered() {
        let cfg = small("saturating-production", 16);
        let eta = HistoryState::constant(1.0, 16);
        let opts = ValueOptions::default().with_knots(12);
        let base = estimate_value(&cfg, &eta, &opts).unwrap();
        let (fwd, central, bwd) = eta0_slopes(&cfg, &eta, 0.05, &opts, &base).unwrap();
        assert!(fwd <= central && central <= bwd, "{fwd} {central} {bwd}");
        assert!(fwd > 0.0);
    }

    #[test]
    fn cache_returns_stored_estimates() {
        let cfg = small("zero-state-utility", 16);
        let cache = ValueCache::default();
        let eta = HistoryState::constant(1.0, 16);
        let opts = ValueOptions::default().with_knots(4).with_horizon(3.0);
        let a = cache.get_or_insert_with("h", &eta, || estimate_value(&cfg, &eta, &opts)).unwrap();
        let b = cache
            .get_or_insert_with("h", &eta, || Err(Error::OutOfDomain))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn zero_state_utility_has_zero_tail_beyond_u1() {
        let cfg = small("zero-state-utility", 16).with_state_utility(StateUtilitySpec::zero());
        let est = estimate_value(&cfg, &HistoryState::constant(1.0, 16), &ValueOptions::default().with_knots(8)).unwrap();
        let expected = (-cfg.rho * est.horizon).exp() * cfg.u1.u_sup / cfg.rho;
        assert!((est.tail_gap - expected).abs() < 1e-15);
    }
}
