//! Approximation pipelines for degenerate data: vanishing state utility,
//! pointwise delay and their combination.
//!
//! Each pipeline returns a control together with a [`CertifiedGap`]: the
//! measured shortfall against a value estimate of the limit problem, the
//! constant the construction promises, and the numerical slack of the
//! estimate itself.

use std::io::Write;

use serde::Serialize;

use crate::dynamics::{integrate, objective, ControlPath, DelayStepper, TailPolicy, Trajectory};
use crate::error::{Error, Result};
use crate::feedback::{closed_loop_solve, FeedbackPolicy};
use crate::model::{
    trapezoid_uniform, DelayMode, HistoryState, KernelShape, KernelSpec, ProblemConfig, StateUtility,
    StateUtilitySpec,
};
use crate::value::{estimate_value, ValueEstimate, ValueOptions};

/// `M = ln(2 (sup U1 - U1(0)) / (rho eps)) / rho`, clamped at 0: past `M`
/// the zero-control continuation loses at most `eps / 2`.
pub fn epsilon_truncation_time(rho: f64, u1_sup: f64, u1_at_0: f64, eps: f64) -> Result<f64> {
    if !(u1_sup > u1_at_0) {
        return Err(Error::DegenerateUtility { u_sup: u1_sup, u_at_0: u1_at_0 });
    }
    if !(rho > 0.0 && eps > 0.0) {
        return Err(Error::InvalidConfig(format!("rho = {rho} and eps = {eps} must be positive")));
    }
    Ok(((2.0 * (u1_sup - u1_at_0) / (rho * eps)).ln() / rho).max(0.0))
}

/// [`epsilon_truncation_time`] rounded up to the state grid of `cfg`.
pub fn grid_truncation_time(cfg: &ProblemConfig, eps: f64) -> Result<f64> {
    let m = epsilon_truncation_time(cfg.rho, cfg.u1.u_sup, cfg.u1.u_at_zero(), eps)?;
    Ok(round_up(m, cfg.dt()))
}

fn round_up(t: f64, dt: f64) -> f64 {
    ((t / dt) - 1e-9).ceil().max(1.0) * dt
}

// ---------------------------------------------------------------------------
// Families
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strength {
    /// `min(0, 1 - 1/(n x))`
    Weak,
    /// `min(0, 1 - 1/(n x)^2)`
    Strong,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StateUtilityFamily {
    pub n: usize,
    pub strength: Strength,
    pub member: StateUtilitySpec,
}

pub fn build_state_utility_family(n: usize, strength: Strength) -> Result<StateUtilityFamily> {
    if n == 0 {
        return Err(Error::InvalidConfig("family index n must be at least 1".into()));
    }
    let nf = n as f64;
    let u = match strength {
        Strength::Weak => StateUtility::Reciprocal { n: nf },
        Strength::Strong => StateUtility::InverseSquare { n: nf },
    };
    Ok(StateUtilityFamily { n, strength, member: StateUtilitySpec::new(u) })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelFamily {
    pub k: usize,
    pub member: KernelSpec,
    pub l1_mass: f64,
    /// Grows like `sqrt(k)`; recorded, not bounded.
    pub l2_norm: f64,
    pub window: f64,
}

pub fn build_kernel_family(k: usize, window: f64, n_hist: usize) -> Result<KernelFamily> {
    if k == 0 {
        return Err(Error::InvalidConfig("kernel index k must be at least 1".into()));
    }
    let member = KernelSpec::new(KernelShape::Mollifier { k }, window, n_hist)?;
    let l1_mass = member.l1_mass(window);
    let l2_norm = member.l2_norm(window);
    Ok(KernelFamily { k, member, l1_mass, l2_norm, window })
}

impl KernelFamily {
    /// `int a_k f` by the trapezoid rule on the kernel grid.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        let n = self.member.samples.len() - 1;
        let h = self.window / n as f64;
        let v: Vec<f64> = self
            .member
            .samples
            .iter()
            .enumerate()
            .map(|(i, a)| a * f(-self.window + i as f64 * h))
            .collect();
        trapezoid_uniform(&v, h)
    }

    /// `|int a_k f - f(-T/2)|` for five fixed smooth test functions.
    pub fn delta_errors(&self) -> [f64; 5] {
        let t = self.window;
        let tests: [&dyn Fn(f64) -> f64; 5] = [
            &|x| x,
            &|x| x * x,
            &|x| (3.0 * x).sin(),
            &|x| x.exp(),
            &|x| (2.0 * std::f64::consts::PI * x / t).cos(),
        ];
        tests.map(|f| (self.integrate(f) - f(-0.5 * t)).abs())
    }
}

// ---------------------------------------------------------------------------
// Pointwise delay and the Gronwall comparison
// ---------------------------------------------------------------------------

/// Integrates `y' = r y + f0(y, y(t - T/2)) - c` regardless of the
/// configured delay mode.
pub fn pointwise_delay_integrate(
    cfg: &ProblemConfig,
    eta: &HistoryState,
    c: &ControlPath,
    horizon: f64,
) -> Result<Trajectory> {
    integrate(&cfg.with_delay_mode(DelayMode::PointwiseMidpoint), eta, c, horizon)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GronwallCertificate {
    pub k: usize,
    pub t: f64,
    pub u_k: f64,
    pub h_of_t: f64,
    /// `h(t) u_k(t)`
    pub bound: f64,
    /// Grid sup of `|x_k - y|` on `[0, t]`.
    pub observed_gap: f64,
}

/// Rate `K` of the Gronwall bound for unit-mass kernels.
pub fn gronwall_rate(cfg: &ProblemConfig) -> f64 {
    cfg.r.abs() + cfg.dynamics.lipschitz_const * (1.0 + cfg.window.sqrt().max(1.0))
}

pub fn gronwall_certificate(
    cfg: &ProblemConfig,
    kernel: &KernelFamily,
    eta: &HistoryState,
    c: &ControlPath,
    t: f64,
) -> Result<GronwallCertificate> {
    let kcfg = cfg
        .with_delay_mode(DelayMode::Kernel)
        .with_kernel(KernelShape::Sampled { samples: kernel.member.samples.clone() })?;
    let y = pointwise_delay_integrate(cfg, eta, c, t)?;
    let x = integrate(&kcfg, eta, c, t)?;
    if !(y.admissible && x.admissible) {
        return Err(Error::Inadmissible { t, value: y.min_value.min(x.min_value) });
    }

    let m = cfg.numerics.substeps;
    let n = cfg.n_hist();
    let lag = n * m / 2;
    let w = kcfg.kernel_weights();
    let origin = y.origin();
    let defect: Vec<f64> = (0..y.forward().len())
        .map(|j| {
            let now = origin + j;
            let base = now - n * m;
            let smeared: f64 = w.iter().enumerate().map(|(i, wi)| wi * y.values[base + i * m]).sum();
            (smeared - y.values[now - lag]).abs()
        })
        .collect();
    let u_k = cfg.dynamics.lipschitz_const * trapezoid_uniform(&defect, y.dt);
    let horizon = y.horizon();
    let kk = gronwall_rate(cfg);
    let h_of_t = 1.0 + kk * horizon * (kk * horizon).exp();
    let observed_gap = x
        .forward()
        .iter()
        .zip(y.forward())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(GronwallCertificate { k: kernel.k, t: horizon, u_k, h_of_t, bound: h_of_t * u_k, observed_gap })
}

// ---------------------------------------------------------------------------
// Uniform floor for optimal trajectories
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NuFloor {
    pub nu: f64,
    /// Growth constant of `x(t) <= x(s)(1 + C (t - s)) + C (t - s)`, with
    /// the safety factor applied.
    pub c_m: f64,
    pub j0: f64,
    /// `nu / (2 C) U2(2 nu) e^{-rho (M + 1)}`
    pub penalty: f64,
    /// `j0 - (sup U1 + sup U2) / rho - 1`
    pub margin: f64,
}

const C_M_SAFETY: f64 = 2.0;

/// Largest dyadic `nu <= 1/2` below which an optimal trajectory on `[0, m]`
/// would pay more than the zero control can lose.
pub fn nu_floor(cfg: &ProblemConfig, eta: &HistoryState, m: f64) -> Result<NuFloor> {
    let c_m = C_M_SAFETY * growth_constant(cfg, eta, m + 1.0)?.max(1e-6);
    let j0 = (cfg.u1.u_at_zero() + cfg.u2.u(eta.eta0)) / cfg.rho;
    let margin = j0 - cfg.payoff_bound() - 1.0;
    let disc = (-cfg.rho * (m + 1.0)).exp();
    let mut nu = 0.5;
    while nu >= 2f64.powi(-40) {
        let penalty = nu / (2.0 * c_m) * cfg.u2.u(2.0 * nu) * disc;
        if nu < 1.0 && nu / (2.0 * c_m) < 1.0 && penalty < margin && margin < 0.0 {
            return Ok(NuFloor { nu, c_m, j0, penalty, margin });
        }
        nu *= 0.5;
    }
    Err(Error::NoFeasibleNu)
}

/// Sup of `(x(t) - x(s)) / ((t - s)(1 + x(s)))` over a bundle of
/// proportional-consumption trajectories on `[0, until]`.
fn growth_constant(cfg: &ProblemConfig, eta: &HistoryState, until: f64) -> Result<f64> {
    let dt = cfg.dt();
    let steps = ((until / dt) - 1e-9).ceil() as usize;
    let mut worst: f64 = 0.0;
    for rate in [0.0, 0.5, 1.0, 2.0] {
        let mut s = DelayStepper::new(cfg, eta)?;
        let mut xs = vec![eta.eta0];
        for _ in 0..steps {
            match s.step(rate * cfg.rho * s.current()) {
                Ok(x) if x > 0.0 => xs.push(x),
                _ => break,
            }
        }
        for (i, a) in xs.iter().enumerate() {
            for (j, b) in xs.iter().enumerate().skip(i + 1) {
                worst = worst.max((b - a) / ((j - i) as f64 * dt * (1.0 + a)));
            }
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Pipelines
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApproxOptions {
    pub eps: f64,
    /// Options of every value estimate.
    pub value: ValueOptions,
    /// Knot count of the feedback oracle.
    pub oracle_knots: usize,
    pub refresh_every: usize,
    pub k_cap: usize,
    pub n_cap: usize,
    pub n_table: Vec<usize>,
    pub eps_sweep: Vec<f64>,
    pub workers: usize,
}

impl Default for ApproxOptions {
    fn default() -> Self {
        Self {
            eps: 0.05,
            value: ValueOptions::default(),
            oracle_knots: 16,
            refresh_every: 4,
            k_cap: 256,
            n_cap: 1024,
            n_table: vec![2, 4, 8, 16],
            eps_sweep: vec![0.2, 0.1, 0.05],
            workers: 1,
        }
    }
}

impl ApproxOptions {
    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub parameter: f64,
    pub value_estimate: f64,
    pub certificate: f64,
    pub gap: f64,
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "parameter,value_estimate,certificate,gap")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.parameter, r.value_estimate, r.certificate, r.gap)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ApproxBudget {
    pub value_tail_gap: f64,
    pub estimator_tolerance: f64,
}

impl ApproxBudget {
    pub fn total(&self) -> f64 {
        self.value_tail_gap + self.estimator_tolerance
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CertifiedGap {
    /// `eps` or `3 eps`.
    pub constant: f64,
    pub value_estimate: f64,
    pub payoff: f64,
    /// `value_estimate - payoff`
    pub gap: f64,
    pub budget: ApproxBudget,
    pub pass: bool,
}

fn certify(
    cfg: &ProblemConfig,
    eta: &HistoryState,
    control: &ControlPath,
    value: &ValueEstimate,
    constant: f64,
) -> Result<CertifiedGap> {
    // the control is zero after its duration, so the state is nondecreasing there
    let horizon = control.duration().max(value.horizon).max(cfg.dt());
    let payoff = objective(cfg, eta, control, horizon, TailPolicy::MonotoneFloor)?;
    let budget = ApproxBudget { value_tail_gap: value.tail_gap, estimator_tolerance: value.tolerance() };
    let gap = value.value - payoff;
    Ok(CertifiedGap { constant, value_estimate: value.value, payoff, gap, budget, pass: gap <= constant + budget.total() })
}

fn finite_estimate(cfg: &ProblemConfig, eta: &HistoryState, opts: &ValueOptions) -> Result<ValueEstimate> {
    let v = estimate_value(cfg, eta, opts)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::OutOfDomain)
    }
}

/// The estimate's control cut at `m` (zero afterwards) and the minimum of
/// its trajectory, which is attained on `[0, m]`.
fn truncated_floor(cfg: &ProblemConfig, eta: &HistoryState, v: &ValueEstimate, m: f64) -> Result<(ControlPath, f64)> {
    let mut path = v.control_path();
    path.values.truncate(((m / path.dt) + 1e-9).round() as usize);
    let traj = integrate(cfg, eta, &path, m)?;
    if !traj.admissible {
        return Err(Error::Inadmissible { t: m, value: traj.min_value });
    }
    Ok((path, traj.min_value))
}

/// Feedback control of `cfg` on `[0, m]`, zero afterwards.
fn synthesize(cfg: &ProblemConfig, eta: &HistoryState, m: f64, opts: &ApproxOptions) -> Result<ControlPath> {
    let policy = FeedbackPolicy::live(cfg, opts.value.clone().with_knots(opts.oracle_knots))?
        .with_refresh(opts.refresh_every);
    Ok(closed_loop_solve(&policy, cfg, eta, m)?.1)
}

fn smallest_dyadic_above(inv_floor: f64, cap: usize) -> Option<usize> {
    let mut n = 2;
    while n <= cap {
        if 1.0 / (n as f64) < inv_floor {
            return Some(n);
        }
        n *= 2;
    }
    None
}

fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(f).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Whether `xs` is nondecreasing up to `tol`.
fn nondecreasing(xs: &[f64], tol: f64) -> bool {
    xs.windows(2).all(|w| w[1] >= w[0] - tol)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NostateResult {
    pub control: ControlPath,
    pub certificate: CertifiedGap,
    pub n: usize,
    pub truncation: f64,
    /// Minimum of the truncated near-optimal trajectory of the limit problem.
    pub floor: f64,
    /// `V^n` against `n`; `certificate` holds `V^0 + tolerance`.
    pub table: Vec<SweepRow>,
    pub monotone: bool,
    /// The returned trajectory stays in `[1/n, inf)`, where `U2^n` vanishes.
    pub outside_support: bool,
}

/// Control for the problem without state utility, synthesized from the
/// weak family member `U2^n` with `1/n` below the trajectory floor.
pub fn construct_eps_optimal_nostate(cfg: &ProblemConfig, eta: &HistoryState, opts: &ApproxOptions) -> Result<NostateResult> {
    if !cfg.u2.is_zero() {
        return Err(Error::InvalidConfig("the limit problem must have zero state utility".into()));
    }
    let v0 = finite_estimate(cfg, eta, &opts.value)?;
    let m = grid_truncation_time(cfg, opts.eps)?;
    let (_, floor) = truncated_floor(cfg, eta, &v0, m)?;
    let n = smallest_dyadic_above(floor, opts.n_cap)
        .ok_or(Error::SweepExhausted { k: opts.n_cap, bound: 1.0 / opts.n_cap as f64, threshold: floor })?;

    let member = |n: usize| -> Result<ProblemConfig> {
        Ok(cfg.with_state_utility(build_state_utility_family(n, Strength::Weak)?.member))
    };
    let mut ns = opts.n_table.clone();
    ns.push(n);
    ns.sort_unstable();
    ns.dedup();
    let estimates = par_map(&ns, opts.workers, |&k| finite_estimate(&member(k)?, eta, &opts.value));
    let mut table = Vec::with_capacity(ns.len());
    let mut tol = 2.0 * v0.tolerance();
    for (&k, est) in ns.iter().zip(estimates) {
        let est = est?;
        tol = tol.max(2.0 * est.tolerance());
        table.push(SweepRow {
            parameter: k as f64,
            value_estimate: est.value,
            certificate: v0.value + v0.tolerance(),
            gap: v0.value - est.value,
        });
    }
    let values: Vec<f64> = table.iter().map(|r| r.value_estimate).collect();
    let monotone = nondecreasing(&values, tol) && values.iter().all(|v| *v <= v0.value + tol);

    let control = synthesize(&member(n)?, eta, m, opts)?;
    let traj = integrate(cfg, eta, &control, m)?;
    let certificate = certify(cfg, eta, &control, &v0, opts.eps)?;
    Ok(NostateResult {
        control,
        certificate,
        n,
        truncation: m,
        floor,
        table,
        monotone,
        outside_support: traj.min_value >= 1.0 / n as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PointwiseResult {
    pub control: ControlPath,
    pub certificate: CertifiedGap,
    pub k_eps: usize,
    pub m_eps: f64,
    /// Half the floor of the truncated near-optimal pointwise trajectory.
    pub nu1: f64,
    /// Threshold for `h(M) u_k(M)`; at most `nu1`, small enough that a state
    /// error below it costs at most `eps / 4` of state utility.
    pub gate: f64,
    pub gronwall: GronwallCertificate,
    /// Floor certificate for the optimal trajectories of the kernel problem.
    pub nu_floor: NuFloor,
    /// `V_k` against `k`; `certificate` holds `h(M) u_k(M)`, `gap` holds `|V_k - V_0|`.
    pub table: Vec<SweepRow>,
    pub decreasing: bool,
}

fn mollified(cfg: &ProblemConfig, k: usize) -> Result<ProblemConfig> {
    cfg.with_delay_mode(DelayMode::Kernel).with_kernel(KernelShape::Mollifier { k })
}

/// Control for the pointwise-delay problem, synthesized from the kernel
/// problem with `a_k` once the Gronwall bound clears the gate, cut at `M`.
pub fn construct_eps_optimal_pointwise(cfg: &ProblemConfig, eta: &HistoryState, opts: &ApproxOptions) -> Result<PointwiseResult> {
    let cfg0 = cfg.with_delay_mode(DelayMode::PointwiseMidpoint);
    cfg0.check_grid()?;
    let eps = opts.eps;
    let v0 = finite_estimate(&cfg0, eta, &opts.value)?;
    let m_half = grid_truncation_time(&cfg0, eps)?;
    let (c_eps, floor) = truncated_floor(&cfg0, eta, &v0, m_half)?;
    let nu1 = 0.5 * floor;

    let rho = cfg.rho;
    let u2 = |x: f64| cfg.u2.u(x);
    let spread = cfg.payoff_bound() - (cfg.u1.u_at_zero() + u2(nu1)) / rho;
    let m_tail = if spread > 0.0 { (4.0 * spread / eps).ln() / rho } else { 0.0 };
    let m_eps = round_up(m_tail.max(m_half), cfg.dt());
    // U2 is concave, so its modulus on [nu1, inf) is attained at nu1
    let weight = -(-rho * m_eps).exp_m1() / rho;
    let mut gate = nu1;
    while weight * (u2(nu1 + gate) - u2(nu1)) > 0.25 * eps {
        gate *= 0.5;
    }

    let mut k = 1;
    let mut ks = Vec::new();
    let gronwall = loop {
        let kernel = build_kernel_family(k, cfg.window, cfg.n_hist())?;
        let cert = gronwall_certificate(&cfg0, &kernel, eta, &c_eps, m_eps)?;
        ks.push((k, cert));
        if cert.bound < gate {
            break cert;
        }
        if 2 * k > opts.k_cap {
            return Err(Error::SweepExhausted { k, bound: cert.bound, threshold: gate });
        }
        k *= 2;
    };
    let k_eps = k;

    let estimates = par_map(&ks, opts.workers, |(k, _)| finite_estimate(&mollified(cfg, *k)?, eta, &opts.value));
    let mut table = Vec::with_capacity(ks.len());
    let mut tol = 2.0 * v0.tolerance();
    for ((k, cert), est) in ks.iter().zip(estimates) {
        let est = est?;
        tol = tol.max(2.0 * est.tolerance());
        table.push(SweepRow {
            parameter: *k as f64,
            value_estimate: est.value,
            certificate: cert.bound,
            gap: (est.value - v0.value).abs(),
        });
    }
    let gaps: Vec<f64> = table.iter().map(|r| -r.gap).collect();
    let decreasing = nondecreasing(&gaps, tol);

    let cfg_k = mollified(cfg, k_eps)?;
    let nu_floor = nu_floor(&cfg_k, eta, m_eps)?;
    let control = synthesize(&cfg_k, eta, m_eps, opts)?;
    let certificate = certify(&cfg0, eta, &control, &v0, eps)?;
    Ok(PointwiseResult {
        control,
        certificate,
        k_eps,
        m_eps,
        nu1,
        gate,
        gronwall,
        nu_floor,
        table,
        decreasing,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CombinedStep {
    pub eps: f64,
    pub n_eps: usize,
    pub k_eps: usize,
    /// `V^{n_eps}_{k_eps}` estimate.
    pub value: f64,
    pub certificate: CertifiedGap,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CombinedResult {
    pub control: ControlPath,
    pub certificate: CertifiedGap,
    pub n_eps: usize,
    pub k_eps: usize,
    pub steps: Vec<CombinedStep>,
    /// `V^{n_eps}_{k_eps}` against `eps`; `certificate` holds `3 eps + budget`,
    /// `gap` holds `|V^{n_eps}_{k_eps} - V_0^0|`.
    pub table: Vec<SweepRow>,
    pub decreasing: bool,
}

/// Control for the pointwise-delay problem without state utility, through
/// the kernel problems with the strong family member `U2^{n_eps}`.
pub fn construct_eps_optimal_combined(cfg: &ProblemConfig, eta: &HistoryState, opts: &ApproxOptions) -> Result<CombinedResult> {
    if !cfg.u2.is_zero() {
        return Err(Error::InvalidConfig("the limit problem must have zero state utility".into()));
    }
    let cfg0 = cfg.with_delay_mode(DelayMode::PointwiseMidpoint);
    cfg0.check_grid()?;
    let v00 = finite_estimate(&cfg0, eta, &opts.value)?;

    let run = |eps: f64| -> Result<(CombinedStep, ControlPath)> {
        let m = grid_truncation_time(&cfg0, eps)?;
        let (_, floor) = truncated_floor(&cfg0, eta, &v00, m)?;
        let nu1 = 0.5 * floor;
        let n = smallest_dyadic_above(nu1, opts.n_cap)
            .ok_or(Error::SweepExhausted { k: opts.n_cap, bound: 1.0 / opts.n_cap as f64, threshold: nu1 })?;
        let cfg_n = cfg.with_state_utility(build_state_utility_family(n, Strength::Strong)?.member);
        let inner = ApproxOptions { eps, workers: 1, ..opts.clone() };
        let res = construct_eps_optimal_pointwise(&cfg_n, eta, &inner)?;
        let value = res.table.last().map(|r| r.value_estimate).unwrap_or(f64::NAN);
        let certificate = certify(&cfg0, eta, &res.control, &v00, 3.0 * eps)?;
        Ok((CombinedStep { eps, n_eps: n, k_eps: res.k_eps, value, certificate }, res.control))
    };

    let mut sweep = opts.eps_sweep.clone();
    if !sweep.iter().any(|e| *e == opts.eps) {
        sweep.push(opts.eps);
    }
    sweep.sort_by(|a, b| b.partial_cmp(a).expect("finite eps"));
    let results = par_map(&sweep, opts.workers, |&e| run(e));
    let mut steps = Vec::with_capacity(sweep.len());
    let mut chosen = None;
    for r in results {
        let (step, control) = r?;
        if step.eps == opts.eps {
            chosen = Some((step.clone(), control));
        }
        steps.push(step);
    }
    let (main, control) = chosen.expect("main eps is in the sweep");
    let table: Vec<SweepRow> = steps
        .iter()
        .filter(|s| opts.eps_sweep.contains(&s.eps))
        .map(|s| SweepRow {
            parameter: s.eps,
            value_estimate: s.value,
            certificate: s.certificate.constant + s.certificate.budget.total(),
            gap: (s.value - v00.value).abs(),
        })
        .collect();
    let gaps: Vec<f64> = table.iter().map(|r| -r.gap).collect();
    let decreasing = nondecreasing(&gaps, 2.0 * v00.tolerance());
    Ok(CombinedResult {
        control,
        certificate: main.certificate,
        n_eps: main.n_eps,
        k_eps: main.k_eps,
        steps,
        table,
        decreasing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{preset, Numerics, ProductionLaw};

    #[test]
    fn truncation_time_matches_closed_form() {
        let m = epsilon_truncation_time(0.1, 1.0, 0.0, 0.01).unwrap();
        assert!((m - 10.0 * 2000f64.ln()).abs() < 1e-12);
        assert!((m - 76.0090).abs() < 1e-3);
        let m2 = epsilon_truncation_time(0.1, 1.0, 0.0, 0.02).unwrap();
        assert!((m - m2 - 2f64.ln() / 0.1).abs() < 1e-9);
        assert_eq!(epsilon_truncation_time(0.1, 1.0, 0.0, 100.0).unwrap(), 0.0);
        assert!(matches!(epsilon_truncation_time(0.1, 0.0, 0.0, 0.1), Err(Error::DegenerateUtility { .. })));
    }

    #[test]
    fn grid_truncation_lands_on_the_grid() {
        let cfg = preset("strong-blowup").unwrap();
        let m = grid_truncation_time(&cfg, 0.05).unwrap();
        let cells = m / cfg.dt();
        assert!((cells - cells.round()).abs() < 1e-9);
        assert!(m >= epsilon_truncation_time(1.0, 1.0, 0.0, 0.05).unwrap());
    }

    #[test]
    fn state_utility_family_members() {
        let weak = build_state_utility_family(1, Strength::Weak).unwrap().member;
        assert_eq!(weak.u(0.5), -1.0);
        for n in [1, 3, 10] {
            for s in [Strength::Weak, Strength::Strong] {
                let f = build_state_utility_family(n, s).unwrap().member;
                assert_eq!(f.u(1.0 / n as f64), 0.0);
                assert_eq!(f.u(2.0 / n as f64), 0.0);
            }
        }
        let strong = build_state_utility_family(1, Strength::Strong).unwrap().member;
        let x = 1e-6;
        assert!((x * strong.u(x) + 1e6).abs() < 1.0);
        for x in [0.01, 0.1, 0.3, 0.9] {
            let lo = build_state_utility_family(2, Strength::Weak).unwrap().member.u(x);
            let hi = build_state_utility_family(4, Strength::Weak).unwrap().member.u(x);
            assert!(lo <= hi && hi <= 0.0);
        }
        assert!(build_state_utility_family(0, Strength::Weak).is_err());
    }

    #[test]
    fn kernel_family_has_unit_mass_and_concentrates() {
        let window = 1.0;
        let mut previous = [f64::INFINITY; 5];
        for k in [1, 2, 4, 8, 16] {
            let fam = build_kernel_family(k, window, 256).unwrap();
            assert!((fam.l1_mass - 1.0).abs() < 1e-10);
            assert_eq!(fam.member.samples[0], 0.0);
            assert!(fam.member.samples.iter().all(|a| *a >= 0.0));
            let moment = (fam.integrate(|x| x) + 0.5 * window).abs();
            assert!(moment < window / (2.0 * k as f64), "k = {k}: {moment}");
            let errs = fam.delta_errors();
            for (e, p) in errs.iter().zip(previous.iter()) {
                assert!(*e <= *p + 1e-10, "k = {k}: {errs:?} after {previous:?}");
            }
            previous = errs;
        }
    }

    fn linear_delay_cfg(n_hist: usize) -> ProblemConfig {
        let mut cfg = preset("strong-blowup").unwrap();
        cfg.r = 0.0;
        cfg.dynamics.f0 = ProductionLaw::Linear { alpha: 0.0, beta: 1.0 };
        cfg.dynamics.lipschitz_const = 1.0;
        cfg.with_numerics(Numerics { n_hist, substeps: 1 }).unwrap()
    }

    #[test]
    fn pointwise_lag_of_constant_history() {
        let cfg = linear_delay_cfg(32);
        let eta = HistoryState::constant(1.0, 32);
        let y = pointwise_delay_integrate(&cfg, &eta, &ControlPath::zero(cfg.dt()), 0.5).unwrap();
        assert!((y.final_value() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn pointwise_comparison_holds_for_ordered_pairs() {
        use rand::{Rng, SeedableRng};
        let cfg = preset("strong-blowup").unwrap().with_numerics(Numerics { n_hist: 16, substeps: 1 }).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let lo = crate::value::random_history(&mut rng, 16, cfg.window);
            let bump: f64 = rng.gen_range(0.0..0.5);
            let hi = HistoryState::new(lo.eta0 + bump, lo.eta1.iter().map(|v| v + bump).collect());
            let c_hi = ControlPath::constant(cfg.dt(), rng.gen_range(0.0..0.2), 2.0);
            let c_lo = ControlPath::constant(cfg.dt(), c_hi.values[0] + rng.gen_range(0.0..0.2), 2.0);
            let a = pointwise_delay_integrate(&cfg, &lo, &c_lo, 2.0).unwrap();
            let b = pointwise_delay_integrate(&cfg, &hi, &c_hi, 2.0).unwrap();
            let scale = 1e-8 * (1.0 + b.values.iter().fold(0.0f64, |m, v| m.max(v.abs())));
            for (x, y) in a.forward().iter().zip(b.forward()) {
                if *x > 0.0 {
                    assert!(*x <= *y + scale);
                }
            }
        }
    }

    #[test]
    fn gronwall_vanishes_on_constant_solutions() {
        let mut cfg = linear_delay_cfg(32);
        cfg.dynamics.f0 = ProductionLaw::Linear { alpha: 0.0, beta: 0.0 };
        let eta = HistoryState::constant(1.0, 32);
        let fam = build_kernel_family(3, cfg.window, 32).unwrap();
        let cert = gronwall_certificate(&cfg, &fam, &eta, &ControlPath::zero(cfg.dt()), 2.0).unwrap();
        assert!(cert.u_k < 1e-12 && cert.bound < 1e-11 && cert.observed_gap < 1e-12);
    }

    #[test]
    fn gronwall_bound_dominates_and_shrinks() {
        for name in ["strong-blowup", "saturating-production"] {
            let cfg = preset(name).unwrap().with_numerics(Numerics { n_hist: 64, substeps: 1 }).unwrap();
            let eta = HistoryState::new(1.0, (0..64).map(|i| 0.5 + i as f64 / 128.0).collect());
            let c = ControlPath::constant(cfg.dt(), 0.1, 2.0);
            let mut last = f64::INFINITY;
            for k in [1, 2, 4, 8, 16] {
                let fam = build_kernel_family(k, cfg.window, 64).unwrap();
                let cert = gronwall_certificate(&cfg, &fam, &eta, &c, 2.0 * cfg.window).unwrap();
                assert!(cert.observed_gap <= cert.bound + 1e-6, "{name} {cert:?}");
                assert!(cert.u_k < last, "{name} k = {k}: {} after {last}", cert.u_k);
                last = cert.u_k;
            }
        }
    }

    #[test]
    fn nu_floor_clauses_and_blowup_strength() {
        let cfg = preset("strong-blowup").unwrap().with_numerics(Numerics { n_hist: 16, substeps: 1 }).unwrap();
        let eta = HistoryState::constant(1.0, 16);
        let mut last = f64::INFINITY;
        for n in [1, 2, 4, 8] {
            let u2 = build_state_utility_family(n, Strength::Strong).unwrap().member;
            let f = nu_floor(&cfg.with_state_utility(u2.clone()), &eta, 4.0).unwrap();
            assert!(f.nu < 1.0 && f.nu / (2.0 * f.c_m) < 1.0);
            let direct = f.nu / (2.0 * f.c_m) * u2.u(2.0 * f.nu) * (-cfg.rho * 5.0).exp();
            assert_eq!(direct, f.penalty);
            assert!(f.penalty < f.margin && f.margin < 0.0);
            // weaker blow-up (larger n) never allows a larger floor
            assert!(f.nu <= last);
            last = f.nu;
        }
        let flat = cfg.with_state_utility(StateUtilitySpec::zero());
        assert_eq!(nu_floor(&flat, &eta, 4.0), Err(Error::NoFeasibleNu));
    }

    #[test]
    fn sweep_csv_layout() {
        let rows = vec![SweepRow { parameter: 2.0, value_estimate: 0.5, certificate: 0.25, gap: 0.125 }];
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "parameter,value_estimate,certificate,gap\n2,0.5,0.25,0.125\n");
    }
}
