//! Feedback synthesis `c = argmax_c (U1(c) - c V_{eta0}(eta))`, the closed
//! loop it generates, and the end-to-end optimality check.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::dynamics::{finish, objective, positivity_tolerance, ControlPath, DelayStepper, TailPolicy, Trajectory};
use crate::error::{Error, Result};
use crate::hamiltonian::legendre;
use crate::model::{HistoryState, ProblemConfig};
use crate::value::{domain_probe, estimate_value, partial_eta0, ValueEstimate, ValueOptions};

/// Default softmin width of a live oracle.
pub const ORACLE_SMOOTHING: f64 = 1e-2;

/// Source of `V_{eta0}`.
#[derive(Clone, Debug)]
pub enum GradientOracle {
    /// Central differences of fresh value estimates.
    Live { opts: ValueOptions, step: Option<f64> },
    /// Fixed shadow price, mostly for tests.
    Constant(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
}

pub struct FeedbackPolicy {
    pub oracle: GradientOracle,
    /// Multiplies every oracle value; 1 for the honest policy.
    pub scale: f64,
    /// Gradient refresh interval in state steps; in between the shadow
    /// price is interpolated linearly.
    pub refresh_every: usize,
    cache: Mutex<HashMap<Vec<i64>, f64>>,
    warm: Mutex<Option<Vec<f64>>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl FeedbackPolicy {
    pub fn new(oracle: GradientOracle) -> Self {
        Self {
            oracle,
            scale: 1.0,
            refresh_every: 4,
            cache: Mutex::new(HashMap::new()),
            warm: Mutex::new(None),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    /// Live oracle with the value horizon pinned so that consecutive
    /// estimates share a schedule and can warm-start each other. Kinked
    /// state utilities are smoothed at width at least
    /// [`ORACLE_SMOOTHING`]; at the kink the unsmoothed slope jumps and the
    /// closed loop chatters.
    pub fn live(cfg: &ProblemConfig, opts: ValueOptions) -> Result<Self> {
        let horizon = opts.resolve_horizon(cfg)?;
        let tau = opts.smoothing_floor.max(ORACLE_SMOOTHING);
        Ok(Self::new(GradientOracle::Live { opts: opts.with_horizon(horizon).with_smoothing(tau), step: None }))
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_refresh(mut self, every: usize) -> Self {
        self.refresh_every = every.max(1);
        self
    }

    pub fn with_step(mut self, h: f64) -> Self {
        if let GradientOracle::Live { step, .. } = &mut self.oracle {
            *step = Some(h);
        }
        self
    }

    pub fn cache_stats(&self) -> CacheStats {
        CacheStats { hits: self.hits.load(Ordering::Relaxed), misses: self.misses.load(Ordering::Relaxed) }
    }

    fn key(eta: &HistoryState) -> Vec<i64> {
        let q = |v: f64| (v * 1e12).round() as i64;
        std::iter::once(q(eta.eta0)).chain(eta.eta1.iter().map(|v| q(*v))).collect()
    }

    /// `V_{eta0}(eta)` times `scale`; always positive.
    pub fn gradient(&self, cfg: &ProblemConfig, eta: &HistoryState) -> Result<f64> {
        let (opts, step) = match &self.oracle {
            GradientOracle::Constant(z) => return self.checked(*z),
            GradientOracle::Live { opts, step } => (opts, *step),
        };
        let key = Self::key(eta);
        if let Some(z) = self.cache.lock().expect("cache poisoned").get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(*z);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let base = self.estimate(cfg, eta, opts)?;
        let z = self.checked(partial_eta0(cfg, eta, step, opts, Some(&base))?)?;
        self.cache.lock().expect("cache poisoned").insert(key, z);
        Ok(z)
    }

    fn estimate(&self, cfg: &ProblemConfig, eta: &HistoryState, opts: &ValueOptions) -> Result<ValueEstimate> {
        let warm = self.warm.lock().expect("cache poisoned").clone();
        let opts = match warm {
            Some(w) => opts.clone().with_warm_start(w),
            None => opts.clone(),
        };
        let est = estimate_value(cfg, eta, &opts)?;
        if !est.is_finite() {
            return Err(Error::OutOfDomain);
        }
        *self.warm.lock().expect("cache poisoned") = Some(est.rates.clone());
        Ok(est)
    }

    fn checked(&self, z: f64) -> Result<f64> {
        let z = z * self.scale;
        if z > 0.0 && z.is_finite() {
            Ok(z)
        } else {
            Err(Error::GradientFailure(format!("shadow price {z}")))
        }
    }
}

/// `C(eta)`, the maximizer of `U1(c) - c V_{eta0}(eta)`.
pub fn feedback_control(policy: &FeedbackPolicy, cfg: &ProblemConfig, eta: &HistoryState) -> Result<f64> {
    if !domain_probe(cfg, eta)?.in_domain {
        return Err(Error::OutOfDomain);
    }
    Ok(legendre(&cfg.u1, policy.gradient(cfg, eta)?)?.c_star)
}

/// Integrates the closed loop on `[0, horizon]`. Every `refresh_every`
/// steps the shadow price is evaluated at the realized state and at a
/// predicted state one block ahead (price held fixed); inside the block
/// the price is interpolated between the two.
pub fn closed_loop_solve(
    policy: &FeedbackPolicy,
    cfg: &ProblemConfig,
    eta: &HistoryState,
    horizon: f64,
) -> Result<(Trajectory, ControlPath)> {
    if !eta.in_h_plus_plus() {
        return Err(Error::OutOfDomain);
    }
    let dt = cfg.dt();
    let steps = ((horizon / dt) - 1e-9).ceil().max(1.0) as usize;
    let tol = positivity_tolerance(eta.eta0);
    let control = |z: f64| -> Result<f64> { Ok(legendre(&cfg.u1, z)?.c_star) };

    let mut s = DelayStepper::new(cfg, eta)?;
    let mut controls = Vec::with_capacity(steps);
    let mut z_start = policy.gradient(cfg, &s.window_state())?;
    while controls.len() < steps {
        let len = policy.refresh_every.min(steps - controls.len());
        let z_end = if len > 1 {
            let mut ahead = s.clone();
            let c = control(z_start)?;
            let ok = (0..len).all(|_| matches!(ahead.step(c), Ok(x) if x > tol));
            if ok {
                policy.gradient(cfg, &ahead.window_state())?
            } else {
                z_start
            }
        } else {
            z_start
        };
        for j in 0..len {
            let z = z_start + (z_end - z_start) * j as f64 / len as f64;
            let c = control(z)?;
            let t = s.time();
            let x = s.step(c).map_err(|_| Error::PositivityLoss { t, value: s.current() })?;
            if !(x > tol) {
                return Err(Error::PositivityLoss { t: s.time(), value: x });
            }
            controls.push(c);
        }
        if controls.len() < steps {
            z_start = policy.gradient(cfg, &s.window_state())?;
        }
    }
    let path = ControlPath { dt, values: controls.clone() };
    Ok((finish(&s, controls, eta.eta0), path))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct VerificationBudget {
    /// Truncation slack of the value estimate.
    pub value_tail_gap: f64,
    /// What stopping the feedback at the horizon can cost.
    pub payoff_tail_gap: f64,
    /// Optimizer and smoothing slack of the value estimate.
    pub estimator_tolerance: f64,
    /// `tau ln 2 / rho` for an oracle that differentiates the value with a
    /// softmin of width `tau` in place of a kinked state utility.
    pub oracle_smoothing: f64,
    /// Effect of the shadow-price uncertainty, measured by refining the
    /// difference step and the knot count of the oracle.
    pub gradient_error: f64,
}

impl VerificationBudget {
    pub fn total(&self) -> f64 {
        self.value_tail_gap + self.payoff_tail_gap + self.estimator_tolerance + self.oracle_smoothing + self.gradient_error
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VerificationReport {
    pub value_estimate: f64,
    pub feedback_payoff: f64,
    /// `V - J`.
    pub gap: f64,
    pub budget: f64,
    pub items: VerificationBudget,
    /// `J >= V - budget`.
    pub pass: bool,
    /// `J <= V + estimator tolerance`.
    pub below_value: bool,
    pub min_state: f64,
    pub cache: CacheStats,
}

impl VerificationReport {
    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Runs the closed loop and compares its payoff with the value estimate.
pub fn verify_optimality(
    policy: &FeedbackPolicy,
    cfg: &ProblemConfig,
    eta: &HistoryState,
    horizon: f64,
    opts: &ValueOptions,
) -> Result<VerificationReport> {
    let value = estimate_value(cfg, eta, opts)?;
    if !value.is_finite() {
        return Err(Error::OutOfDomain);
    }
    let (traj, path) = closed_loop_solve(policy, cfg, eta, horizon)?;

    // zero control after the feedback horizon, evaluated like the estimator
    let tail_from = horizon.max(value.horizon);
    let payoff = objective(cfg, eta, &path, tail_from, TailPolicy::MonotoneFloor)?;
    let rho = cfg.rho;
    let slack = |t: f64, x: f64| {
        (-rho * t).exp() * (cfg.u1.u_sup - cfg.u1.u_at_zero() + cfg.u2.u_sup - cfg.u2.u(x)).max(0.0) / rho
    };

    // Hamiltonian defect of a wrong price: U1(c) - z c - (U1(c') - z c')
    // <= |z' - z| |c' - c| per unit time, integrated with the discount.
    let gradient_error = match &policy.oracle {
        GradientOracle::Live { opts: o, step } => {
            let mid_state = window_at(cfg, &traj, 0.5 * horizon);
            let mut worst: f64 = 0.0;
            for state in [eta.clone(), mid_state] {
                worst = worst.max(price_defect(cfg, &state, o, *step)?);
            }
            worst / rho
        }
        GradientOracle::Constant(_) => 0.0,
    };
    let oracle_smoothing = match &policy.oracle {
        GradientOracle::Live { opts: o, .. } if cfg.u2.has_kink() => {
            o.smoothing_floor * std::f64::consts::LN_2 / rho
        }
        _ => 0.0,
    };
    let items = VerificationBudget {
        value_tail_gap: value.tail_gap,
        payoff_tail_gap: slack(horizon, traj.final_value()),
        estimator_tolerance: value.tolerance(),
        oracle_smoothing,
        gradient_error,
    };
    let budget = items.total();
    let gap = value.value - payoff;
    Ok(VerificationReport {
        value_estimate: value.value,
        feedback_payoff: payoff,
        gap,
        budget,
        items,
        pass: payoff >= value.value - budget,
        below_value: payoff <= value.value + value.tolerance(),
        min_state: traj.min_value,
        cache: policy.cache_stats(),
    })
}

/// History state of a trajectory at grid time `t`.
fn window_at(cfg: &ProblemConfig, traj: &Trajectory, t: f64) -> HistoryState {
    let n = cfg.n_hist();
    let stride = cfg.numerics.substeps;
    let now = traj.origin() + (t / traj.dt).round() as usize;
    let base = now - n * stride;
    HistoryState { eta0: traj.values[now], eta1: (0..n).map(|i| traj.values[base + i * stride]).collect() }
}

/// Largest `|z' - z| |C(z') - C(z)|` between the oracle price and its
/// refinements in the step and in the knot count.
fn price_defect(cfg: &ProblemConfig, eta: &HistoryState, opts: &ValueOptions, step: Option<f64>) -> Result<f64> {
    let h = step.unwrap_or_else(|| crate::value::default_eta0_step(eta.eta0));
    let base = estimate_value(cfg, eta, opts)?;
    let z = partial_eta0(cfg, eta, Some(h), opts, Some(&base))?;
    let z_half = partial_eta0(cfg, eta, Some(0.5 * h), opts, Some(&base))?;
    let fine = opts.clone().with_knots(2 * opts.knots);
    let z_fine = partial_eta0(cfg, eta, Some(h), &fine, None)?;
    let c = legendre(&cfg.u1, z)?.c_star;
    let mut worst: f64 = 0.0;
    for other in [z_half, z_fine] {
        let c_other = legendre(&cfg.u1, other)?.c_star;
        worst = worst.max((other - z).abs() * (c_other - c).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::integrate;
    use crate::model::{preset, Numerics};

    fn small(name: &str, n: usize) -> ProblemConfig {
        preset(name).unwrap().with_numerics(Numerics { n_hist: n, substeps: 1 }).unwrap()
    }

    fn quick() -> ValueOptions {
        ValueOptions::default().with_knots(8)
    }

    #[test]
    fn steep_price_suppresses_consumption() {
        let cfg = small("strong-blowup", 8);
        let pol = FeedbackPolicy::new(GradientOracle::Constant(1e9));
        let c = feedback_control(&pol, &cfg, &HistoryState::constant(1.0, 8)).unwrap();
        assert!(c < 1e-12, "{c}");
    }

    #[test]
    fn control_matches_grid_search() {
        let cfg = small("saturating-production", 8);
        let eta = HistoryState::constant(1.0, 8);
        for z in [0.05, 0.3, 2.0] {
            let pol = FeedbackPolicy::new(GradientOracle::Constant(z));
            let c = feedback_control(&pol, &cfg, &eta).unwrap();
            let top = 4.0 * c + 1.0;
            let step = top / 999.0;
            let best = (0..1000)
                .map(|i| i as f64 * step)
                .max_by(|a, b| (cfg.u1.u(*a) - z * a).total_cmp(&(cfg.u1.u(*b) - z * b)))
                .unwrap();
            assert!((best - c).abs() <= step, "z = {z}: {c} vs {best}");
        }
    }

    #[test]
    fn constant_price_reduces_to_constant_control() {
        let cfg = small("saturating-production", 8);
        let eta = HistoryState::constant(1.2, 8);
        let z = 0.8;
        let pol = FeedbackPolicy::new(GradientOracle::Constant(z));
        let (traj, path) = closed_loop_solve(&pol, &cfg, &eta, 3.0).unwrap();
        let c = legendre(&cfg.u1, z).unwrap().c_star;
        let direct = integrate(&cfg, &eta, &ControlPath::constant(cfg.dt(), c, 3.0), 3.0).unwrap();
        assert!(path.values.iter().all(|v| *v == c));
        assert_eq!(traj.values, direct.values);
    }

    #[test]
    fn realized_control_is_the_feedback_of_realized_states() {
        let cfg = small("strong-blowup", 8);
        let eta = HistoryState::constant(1.3, 8);
        let pol = FeedbackPolicy::live(&cfg, quick()).unwrap().with_refresh(1);
        let (traj, path) = closed_loop_solve(&pol, &cfg, &eta, 0.5).unwrap();
        let misses = pol.cache_stats().misses;
        for (n, c) in path.values.iter().enumerate() {
            let state = window_at(&cfg, &traj, n as f64 * cfg.dt());
            let z = pol.gradient(&cfg, &state).unwrap();
            assert!((legendre(&cfg.u1, z).unwrap().c_star - c).abs() < 1e-12, "step {n}");
        }
        // every lookup above was served from the cache
        assert_eq!(pol.cache_stats().misses, misses);
        assert_eq!(pol.cache_stats().hits, path.values.len());
    }

    #[test]
    fn feedback_is_continuous_in_the_state() {
        let cfg = small("saturating-production", 8);
        let eta = HistoryState::constant(1.5, 8);
        let pol = FeedbackPolicy::live(&cfg, quick()).unwrap();
        let c = feedback_control(&pol, &cfg, &eta).unwrap();
        let near = feedback_control(&pol, &cfg, &eta.shifted(1e-3)).unwrap();
        assert!((c - near).abs() < 1e-2 * (1.0 + c), "{c} vs {near}");
    }

    #[test]
    fn honest_policy_verifies_and_corrupted_one_does_worse() {
        let cfg = small("strong-blowup", 16);
        let eta = HistoryState::constant(1.0, 16);
        let opts = quick();
        let honest = FeedbackPolicy::live(&cfg, opts.clone()).unwrap();
        let report = verify_optimality(&honest, &cfg, &eta, 4.0, &opts).unwrap();
        assert!(report.pass, "{}", report.to_text());
        assert!(report.below_value, "{}", report.to_text());
        assert!(report.min_state > 0.0);

        let corrupted = FeedbackPolicy::live(&cfg, opts.clone()).unwrap().with_scale(10.0);
        let bad = verify_optimality(&corrupted, &cfg, &eta, 4.0, &opts).unwrap();
        assert!(bad.gap > report.gap, "{} vs {}", bad.gap, report.gap);
    }

    #[test]
    fn refinement_stays_within_the_previous_budget() {
        let cfg = small("strong-blowup", 8);
        let eta = HistoryState::constant(1.2, 8);
        let opts = quick();
        let coarse = FeedbackPolicy::live(&cfg, opts.clone()).unwrap().with_refresh(4);
        let base = verify_optimality(&coarse, &cfg, &eta, 3.0, &opts).unwrap();
        let mut prev_budget = base.budget;
        for (refresh, h) in [(2, 1e-3), (1, 5e-4)] {
            let pol = FeedbackPolicy::live(&cfg, opts.clone()).unwrap().with_refresh(refresh).with_step(h);
            let r = verify_optimality(&pol, &cfg, &eta, 3.0, &opts).unwrap();
            assert!(r.gap <= prev_budget, "refresh {refresh}: {} > {prev_budget}", r.gap);
            prev_budget = r.budget;
        }
    }
}
