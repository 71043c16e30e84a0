//! Model data: dynamics, delay kernel, utilities, history states, the
//! hypothesis validator and the built-in preset catalog.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A two-argument closure usable as a production law.
#[derive(Clone)]
pub struct Fn2(pub Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>);

/// A one-argument closure usable as a utility or its derivative.
#[derive(Clone)]
pub struct Fn1(pub Arc<dyn Fn(f64) -> f64 + Send + Sync>);

impl fmt::Debug for Fn2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("<closure>")
    }
}

impl fmt::Debug for Fn1 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("<closure>")
    }
}

impl PartialEq for Fn2 {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

impl PartialEq for Fn1 {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

/// The production term `f0(x, y)` where `y` is the delayed aggregate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProductionLaw {
    /// `alpha * min(x, cap) + beta * y`
    Saturating { alpha: f64, cap: f64, beta: f64 },
    /// `alpha * x + beta * y`
    Linear { alpha: f64, beta: f64 },
    #[serde(skip)]
    Custom { name: String, f: Fn2 },
}

impl ProductionLaw {
    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            ProductionLaw::Saturating { alpha, cap, beta } => alpha * x.min(*cap) + beta * y,
            ProductionLaw::Linear { alpha, beta } => alpha * x + beta * y,
            ProductionLaw::Custom { f, .. } => (f.0)(x, y),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSpec {
    pub f0: ProductionLaw,
    pub lipschitz_const: f64,
}

impl DynamicsSpec {
    pub fn f0(&self, x: f64, y: f64) -> f64 {
        self.f0.eval(x, y)
    }
}

/// Shape of the delay kernel `a(.)` on `[-T, 0]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KernelShape {
    /// `a(xi) = 2 (xi + T) / T^2`: unit mass, zero at `-T`, maximal at 0.
    Ramp,
    /// `a = 1/T`. Does not vanish at `-T`; useful only for linear checks.
    Uniform,
    /// Faded, floored and renormalized Gaussian concentrating at `-T/2`.
    Mollifier { k: usize },
    /// Raw samples on the closed history grid (`n_hist + 1` values).
    Sampled { samples: Vec<f64> },
}

/// Smallest kernel value kept on `(-T/2, 0]` so that every left
/// neighbourhood of 0 carries positive mass.
pub const MOLLIFIER_FLOOR: f64 = 1e-12;

impl KernelShape {
    pub fn sample(&self, window: f64, n_hist: usize) -> Result<Vec<f64>> {
        let h = window / n_hist as f64;
        let xi = |i: usize| -window + i as f64 * h;
        let samples = match self {
            KernelShape::Ramp => (0..=n_hist)
                .map(|i| 2.0 * (xi(i) + window) / (window * window))
                .collect(),
            KernelShape::Uniform => vec![1.0 / window; n_hist + 1],
            KernelShape::Mollifier { k } => mollifier_samples(*k, window, n_hist),
            KernelShape::Sampled { samples } => {
                if samples.len() != n_hist + 1 {
                    return Err(Error::ConfigMismatch(format!(
                        "kernel has {} samples, grid needs {}",
                        samples.len(),
                        n_hist + 1
                    )));
                }
                samples.clone()
            }
        };
        Ok(samples)
    }
}

fn mollifier_samples(k: usize, window: f64, n_hist: usize) -> Vec<f64> {
    let k = k.max(1);
    let h = window / n_hist as f64;
    let center = -window / 2.0;
    let width = window / (4.0 * k as f64);
    let fade_len = window / 4.0;
    let mut a: Vec<f64> = (0..=n_hist)
        .map(|i| {
            let xi = -window + i as f64 * h;
            let z = (xi - center) / width;
            let fade = ((xi + window) / fade_len).min(1.0);
            let mut v = (-0.5 * z * z).exp() * fade;
            if xi > center && v < MOLLIFIER_FLOOR {
                v = MOLLIFIER_FLOOR;
            }
            v
        })
        .collect();
    a[0] = 0.0;
    let mass = trapezoid_uniform(&a, h);
    for v in &mut a {
        *v /= mass;
    }
    a
}

/// Trapezoid rule on a uniform grid.
pub fn trapezoid_uniform(values: &[f64], h: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => h * (0.5 * (values[0] + values[n - 1]) + values[1..n - 1].iter().sum::<f64>()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub shape: KernelShape,
    pub samples: Vec<f64>,
    /// Discrete `L^2` norm of `a'` (a surrogate for the `W^{1,2}` seminorm).
    pub derivative_bound: f64,
}

impl KernelSpec {
    pub fn new(shape: KernelShape, window: f64, n_hist: usize) -> Result<Self> {
        let samples = shape.sample(window, n_hist)?;
        let h = window / n_hist as f64;
        let derivative_bound = samples
            .windows(2)
            .map(|w| ((w[1] - w[0]) / h).powi(2) * h)
            .sum::<f64>()
            .sqrt();
        Ok(Self { shape, samples, derivative_bound })
    }

    pub fn l1_mass(&self, window: f64) -> f64 {
        let h = window / (self.samples.len() - 1) as f64;
        let abs: Vec<f64> = self.samples.iter().map(|v| v.abs()).collect();
        trapezoid_uniform(&abs, h)
    }

    pub fn l2_norm(&self, window: f64) -> f64 {
        let h = window / (self.samples.len() - 1) as f64;
        let sq: Vec<f64> = self.samples.iter().map(|v| v * v).collect();
        trapezoid_uniform(&sq, h).sqrt()
    }

    /// Trapezoid mass of `a` on `[-eps, 0]`, `eps` rounded down to the grid.
    pub fn mass_near_zero(&self, window: f64, eps: f64) -> f64 {
        let n = self.samples.len() - 1;
        let h = window / n as f64;
        let cells = ((eps / h) + 1e-9).floor() as usize;
        trapezoid_uniform(&self.samples[n - cells.min(n)..], h)
    }
}

/// Consumption utility `U1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConsumptionUtility {
    /// `c^g / (1 + c^g)`, bounded by 1 with infinite slope at 0.
    PowerRatio { gamma: f64 },
    /// `c`. Unbounded, kept to exercise the validator.
    Linear,
    #[serde(skip)]
    Custom { name: String, u: Fn1, u_prime: Fn1, u_sup: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilitySpec {
    pub u: ConsumptionUtility,
    pub u_sup: f64,
}

impl UtilitySpec {
    pub fn new(u: ConsumptionUtility) -> Self {
        let u_sup = match &u {
            ConsumptionUtility::PowerRatio { .. } => 1.0,
            ConsumptionUtility::Linear => f64::INFINITY,
            ConsumptionUtility::Custom { u_sup, .. } => *u_sup,
        };
        Self { u, u_sup }
    }

    pub fn default_power() -> Self {
        Self::new(ConsumptionUtility::PowerRatio { gamma: 0.5 })
    }

    #[inline]
    pub fn u(&self, c: f64) -> f64 {
        match &self.u {
            ConsumptionUtility::PowerRatio { gamma } => {
                if c <= 0.0 {
                    0.0
                } else {
                    let p = c.powf(*gamma);
                    if p.is_infinite() {
                        1.0
                    } else {
                        p / (1.0 + p)
                    }
                }
            }
            ConsumptionUtility::Linear => c,
            ConsumptionUtility::Custom { u, .. } => (u.0)(c),
        }
    }

    #[inline]
    pub fn u_prime(&self, c: f64) -> f64 {
        match &self.u {
            ConsumptionUtility::PowerRatio { gamma } => {
                if c <= 0.0 {
                    return f64::INFINITY;
                }
                let p = c.powf(*gamma);
                gamma * p / (c * (1.0 + p) * (1.0 + p))
            }
            ConsumptionUtility::Linear => 1.0,
            ConsumptionUtility::Custom { u_prime, .. } => (u_prime.0)(c),
        }
    }

    pub fn u_at_zero(&self) -> f64 {
        self.u(0.0)
    }
}

/// State utility `U2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StateUtility {
    Zero,
    /// `min(0, 1 - 1/(n x))`: logarithmically non-integrable at `0+`.
    Reciprocal { n: f64 },
    /// `min(0, 1 - 1/(n x)^2)`: `x U2(x) -> -inf` as `x -> 0+`.
    InverseSquare { n: f64 },
    #[serde(skip)]
    Custom { name: String, u: Fn1, u_sup: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateUtilitySpec {
    pub u: StateUtility,
    pub u_sup: f64,
    pub nonintegrable_at_zero: bool,
    pub strong_blowup: bool,
}

impl StateUtilitySpec {
    pub fn new(u: StateUtility) -> Self {
        let (u_sup, nonint, strong) = match &u {
            StateUtility::Zero => (0.0, false, false),
            StateUtility::Reciprocal { .. } => (0.0, true, false),
            StateUtility::InverseSquare { .. } => (0.0, true, true),
            StateUtility::Custom { u_sup, .. } => (*u_sup, false, false),
        };
        Self { u, u_sup, nonintegrable_at_zero: nonint, strong_blowup: strong }
    }

    pub fn zero() -> Self {
        Self::new(StateUtility::Zero)
    }

    #[inline]
    pub fn u(&self, x: f64) -> f64 {
        match &self.u {
            StateUtility::Zero => 0.0,
            StateUtility::Reciprocal { n } => {
                if x <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    (1.0 - 1.0 / (n * x)).min(0.0)
                }
            }
            StateUtility::InverseSquare { n } => {
                if x <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    let z = n * x;
                    (1.0 - 1.0 / (z * z)).min(0.0)
                }
            }
            StateUtility::Custom { u, .. } => (u.0)(x),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.u, StateUtility::Zero)
    }

    /// Whether [`Self::u_smooth`] differs from [`Self::u`].
    pub fn has_kink(&self) -> bool {
        matches!(self.u, StateUtility::Reciprocal { .. } | StateUtility::InverseSquare { .. })
    }

    /// The `min(0, g)` families with the minimum replaced by
    /// `-tau ln(1 + e^{-g/tau})`, which lies within `tau ln 2` below `u`
    /// and keeps concavity and monotonicity. Other utilities are returned as is.
    pub fn u_smooth(&self, x: f64, tau: f64) -> f64 {
        let g = match &self.u {
            _ if tau <= 0.0 => return self.u(x),
            StateUtility::Reciprocal { n } if x > 0.0 => 1.0 - 1.0 / (n * x),
            StateUtility::InverseSquare { n } if x > 0.0 => {
                let z = n * x;
                1.0 - 1.0 / (z * z)
            }
            _ => return self.u(x),
        };
        if g >= 0.0 {
            -tau * (-g / tau).exp().ln_1p()
        } else {
            g - tau * (g / tau).exp().ln_1p()
        }
    }
}

/// How the delayed aggregate enters `f0`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DelayMode {
    /// `y = int a(xi) x(t + xi) dxi`
    #[default]
    Kernel,
    /// `y = x(t - T/2)`
    PointwiseMidpoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Numerics {
    /// History samples on `[-T, 0)`; the history grid step is `T / n_hist`.
    pub n_hist: usize,
    /// State steps per history cell.
    pub substeps: usize,
}

impl Default for Numerics {
    fn default() -> Self {
        Self { n_hist: 64, substeps: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemConfig {
    pub r: f64,
    pub rho: f64,
    /// Delay window length `T`.
    pub window: f64,
    pub dynamics: DynamicsSpec,
    pub kernel: KernelSpec,
    pub u1: UtilitySpec,
    pub u2: StateUtilitySpec,
    pub delay_mode: DelayMode,
    pub numerics: Numerics,
}

impl ProblemConfig {
    /// History grid step.
    pub fn h(&self) -> f64 {
        self.window / self.numerics.n_hist as f64
    }

    /// State (integration) step.
    pub fn dt(&self) -> f64 {
        self.h() / self.numerics.substeps as f64
    }

    /// State steps per delay window.
    pub fn steps_per_window(&self) -> usize {
        self.numerics.n_hist * self.numerics.substeps
    }

    pub fn n_hist(&self) -> usize {
        self.numerics.n_hist
    }

    /// Upper bound `(U1_sup + U2_sup) / rho` on any payoff.
    pub fn payoff_bound(&self) -> f64 {
        (self.u1.u_sup + self.u2.u_sup) / self.rho
    }

    /// Trapezoid weights times kernel samples on the closed history grid.
    pub fn kernel_weights(&self) -> Vec<f64> {
        let n = self.n_hist();
        let h = self.h();
        self.kernel
            .samples
            .iter()
            .enumerate()
            .map(|(i, a)| if i == 0 || i == n { 0.5 * h * a } else { h * a })
            .collect()
    }

    /// Re-grids the configuration, resampling the kernel shape.
    pub fn with_numerics(&self, numerics: Numerics) -> Result<Self> {
        let mut cfg = self.clone();
        cfg.numerics = numerics;
        cfg.kernel = KernelSpec::new(self.kernel.shape.clone(), self.window, numerics.n_hist)?;
        Ok(cfg)
    }

    pub fn with_kernel(&self, shape: KernelShape) -> Result<Self> {
        let mut cfg = self.clone();
        cfg.kernel = KernelSpec::new(shape, self.window, self.n_hist())?;
        Ok(cfg)
    }

    pub fn with_state_utility(&self, u2: StateUtilitySpec) -> Self {
        let mut cfg = self.clone();
        cfg.u2 = u2;
        cfg
    }

    pub fn with_delay_mode(&self, mode: DelayMode) -> Self {
        let mut cfg = self.clone();
        cfg.delay_mode = mode;
        cfg
    }

    /// Checks that the grids are commensurate with the delay structure.
    pub fn check_grid(&self) -> Result<()> {
        if self.numerics.n_hist < 2 || self.numerics.substeps == 0 {
            return Err(Error::ConfigMismatch("n_hist >= 2 and substeps >= 1 required".into()));
        }
        if self.kernel.samples.len() != self.n_hist() + 1 {
            return Err(Error::ConfigMismatch(format!(
                "kernel has {} samples, grid needs {}",
                self.kernel.samples.len(),
                self.n_hist() + 1
            )));
        }
        if self.delay_mode == DelayMode::PointwiseMidpoint && self.n_hist() % 2 != 0 {
            return Err(Error::ConfigMismatch("pointwise lag T/2 needs an even n_hist".into()));
        }
        if !(self.window > 0.0 && self.rho > 0.0) {
            return Err(Error::InvalidConfig("T > 0 and rho > 0 required".into()));
        }
        Ok(())
    }

    pub fn to_file(&self) -> ConfigFile {
        ConfigFile {
            preset: None,
            model: Some(ModelSection {
                r: self.r,
                rho: self.rho,
                window: self.window,
                dynamics: self.dynamics.clone(),
                delay_mode: self.delay_mode,
            }),
            kernel: Some(KernelSection {
                shape: Some(self.kernel.shape.clone()),
                samples: None,
                derivative_bound: Some(self.kernel.derivative_bound),
            }),
            utility1: Some(self.u1.clone()),
            utility2: Some(self.u2.clone()),
            numerics: Some(self.numerics),
        }
    }

    /// Content hash of the configuration (hex SHA-256 of its canonical text).
    pub fn content_hash(&self) -> String {
        let text = toml::to_string(&self.to_file()).unwrap_or_else(|_| format!("{self:?}"));
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// The point `eta = (eta0, eta1)`: present value plus history samples at
/// `-T + i h`, `i = 0..n_hist`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryState {
    pub eta0: f64,
    pub eta1: Vec<f64>,
}

impl HistoryState {
    pub fn new(eta0: f64, eta1: Vec<f64>) -> Self {
        Self { eta0, eta1 }
    }

    pub fn constant(value: f64, n_hist: usize) -> Self {
        Self { eta0: value, eta1: vec![value; n_hist] }
    }

    pub fn in_h_plus(&self) -> bool {
        self.eta0 > 0.0
    }

    pub fn in_h_plus_plus(&self) -> bool {
        self.eta0 > 0.0 && self.eta1.iter().all(|v| *v >= 0.0)
    }

    pub fn shifted(&self, d_eta0: f64) -> Self {
        Self { eta0: self.eta0 + d_eta0, eta1: self.eta1.clone() }
    }

    pub fn midpoint(&self, other: &Self) -> Self {
        Self {
            eta0: 0.5 * (self.eta0 + other.eta0),
            eta1: self.eta1.iter().zip(&other.eta1).map(|(a, b)| 0.5 * (a + b)).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Config file schema
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub r: f64,
    pub rho: f64,
    #[serde(rename = "T")]
    pub window: f64,
    pub dynamics: DynamicsSpec,
    #[serde(default)]
    pub delay_mode: DelayMode,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<KernelShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derivative_bound: Option<f64>,
}

/// On-disk configuration: `[model]`, `[kernel]`, `[utility1]`,
/// `[utility2]`, `[numerics]`, optionally layered over a named preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utility1: Option<UtilitySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utility2: Option<StateUtilitySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub numerics: Option<Numerics>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn resolve(&self) -> Result<ProblemConfig> {
        let base = match &self.preset {
            Some(name) => Some(preset(name)?),
            None => None,
        };
        let numerics = self
            .numerics
            .or(base.as_ref().map(|b| b.numerics))
            .unwrap_or_default();
        let model = match (&self.model, &base) {
            (Some(m), _) => m.clone(),
            (None, Some(b)) => ModelSection {
                r: b.r,
                rho: b.rho,
                window: b.window,
                dynamics: b.dynamics.clone(),
                delay_mode: b.delay_mode,
            },
            (None, None) => return Err(Error::InvalidConfig("missing [model] section".into())),
        };
        let shape = match (&self.kernel, &base) {
            (Some(k), _) => match (&k.shape, &k.samples) {
                (Some(s), _) => s.clone(),
                (None, Some(samples)) => KernelShape::Sampled { samples: samples.clone() },
                (None, None) => {
                    return Err(Error::InvalidConfig("[kernel] needs shape or samples".into()))
                }
            },
            (None, Some(b)) => b.kernel.shape.clone(),
            (None, None) => return Err(Error::InvalidConfig("missing [kernel] section".into())),
        };
        let mut kernel = KernelSpec::new(shape, model.window, numerics.n_hist)?;
        if let Some(db) = self.kernel.as_ref().and_then(|k| k.derivative_bound) {
            kernel.derivative_bound = db;
        }
        let u1 = match (&self.utility1, &base) {
            (Some(u), _) => u.clone(),
            (None, Some(b)) => b.u1.clone(),
            (None, None) => UtilitySpec::default_power(),
        };
        let u2 = match (&self.utility2, &base) {
            (Some(u), _) => u.clone(),
            (None, Some(b)) => b.u2.clone(),
            (None, None) => StateUtilitySpec::zero(),
        };
        let cfg = ProblemConfig {
            r: model.r,
            rho: model.rho,
            window: model.window,
            dynamics: model.dynamics,
            kernel,
            u1,
            u2,
            delay_mode: model.delay_mode,
            numerics,
        };
        cfg.check_grid()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

pub const PRESET_NAMES: [&str; 3] = ["saturating-production", "zero-state-utility", "strong-blowup"];

pub fn preset(name: &str) -> Result<ProblemConfig> {
    let numerics = Numerics::default();
    let window = 1.0;
    let ramp = KernelSpec::new(KernelShape::Ramp, window, numerics.n_hist)?;
    let cfg = match name {
        "saturating-production" => ProblemConfig {
            r: 0.02,
            rho: 1.0,
            window,
            dynamics: DynamicsSpec {
                f0: ProductionLaw::Saturating { alpha: 0.5, cap: 10.0, beta: 0.3 },
                lipschitz_const: 0.8,
            },
            kernel: ramp,
            u1: UtilitySpec::default_power(),
            u2: StateUtilitySpec::new(StateUtility::Reciprocal { n: 1.0 }),
            delay_mode: DelayMode::Kernel,
            numerics,
        },
        "zero-state-utility" => ProblemConfig {
            r: 0.0,
            rho: 0.7,
            window,
            dynamics: DynamicsSpec {
                f0: ProductionLaw::Saturating { alpha: 0.4, cap: 10.0, beta: 0.2 },
                lipschitz_const: 0.6,
            },
            kernel: ramp,
            u1: UtilitySpec::default_power(),
            u2: StateUtilitySpec::zero(),
            delay_mode: DelayMode::Kernel,
            numerics,
        },
        "strong-blowup" => ProblemConfig {
            r: 0.0,
            rho: 1.0,
            window,
            dynamics: DynamicsSpec {
                f0: ProductionLaw::Saturating { alpha: 0.25, cap: 10.0, beta: 0.2 },
                lipschitz_const: 0.45,
            },
            kernel: ramp,
            u1: UtilitySpec::default_power(),
            u2: StateUtilitySpec::new(StateUtility::InverseSquare { n: 1.0 }),
            delay_mode: DelayMode::Kernel,
            numerics,
        },
        other => return Err(Error::InvalidConfig(format!("unknown preset '{other}'"))),
    };
    Ok(cfg)
}

/// All built-in presets, in catalog order.
pub fn builtin_catalog() -> Vec<(&'static str, ProblemConfig)> {
    PRESET_NAMES
        .iter()
        .map(|n| (*n, preset(n).expect("built-in preset")))
        .collect()
}

// ---------------------------------------------------------------------------
// Hypothesis validation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HypothesisCheck {
    pub name: &'static str,
    pub passed: bool,
    /// First failing sample, when there is one.
    pub witness: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<HypothesisCheck>,
    /// `r x + f0(x, 0) >= 0` on the sample grid; needed by the approximation pipelines.
    pub approximation_ready: HypothesisCheck,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&HypothesisCheck> {
        self.checks.iter().chain(std::iter::once(&self.approximation_ready)).find(|c| c.name == name)
    }

    pub fn failures(&self) -> Vec<&HypothesisCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

const CONCAVITY_TOL: f64 = 1e-10;

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

fn check(name: &'static str, witness: Option<String>) -> HypothesisCheck {
    HypothesisCheck { name, passed: witness.is_none(), witness }
}

/// Sample points for `f0`: x in `{0} U logspace(1e-3, 1e3)`, y symmetric.
fn f0_samples() -> (Vec<f64>, Vec<f64>) {
    let mut xs = vec![0.0];
    xs.extend(log_grid(1e-3, 1e3, 99));
    let pos = log_grid(1e-3, 1e2, 50);
    let mut ys: Vec<f64> = pos.iter().rev().map(|v| -v).collect();
    ys.extend(pos);
    (xs, ys)
}

/// Runs every sample-based hypothesis check on `cfg`. Pure and deterministic.
pub fn validate_config(cfg: &ProblemConfig) -> ValidationReport {
    let mut checks = Vec::new();
    checks.push(check(
        "rho>0",
        (!(cfg.rho > 0.0)).then(|| format!("rho = {}", cfg.rho)),
    ));
    checks.push(check("T>0", (!(cfg.window > 0.0)).then(|| format!("T = {}", cfg.window))));
    checks.push(check(
        "grid",
        cfg.check_grid().err().map(|e| e.to_string()),
    ));

    let f0 = |x: f64, y: f64| cfg.dynamics.f0(x, y);
    let (xs, ys) = f0_samples();
    let n = xs.len();

    // joint concavity on deterministic pseudo-random pairs
    let mut witness = None;
    'outer: for i in 0..n {
        let p = (xs[i], ys[(7 * i + 3) % n]);
        let q = (xs[(31 * i + 11) % n], ys[(53 * i + 5) % n]);
        for lambda in [0.25, 0.5, 0.75] {
            let m = (lambda * p.0 + (1.0 - lambda) * q.0, lambda * p.1 + (1.0 - lambda) * q.1);
            let lhs = f0(m.0, m.1);
            let rhs = lambda * f0(p.0, p.1) + (1.0 - lambda) * f0(q.0, q.1);
            if lhs < rhs - CONCAVITY_TOL * (1.0 + rhs.abs()) {
                witness = Some(format!("p = {p:?}, q = {q:?}, lambda = {lambda}"));
                break 'outer;
            }
        }
    }
    checks.push(check("f0 jointly concave", witness));

    let mut witness = None;
    'mono: for &x in &xs {
        for w in ys.windows(2) {
            if f0(x, w[1]) < f0(x, w[0]) - 1e-12 * (1.0 + f0(x, w[0]).abs()) {
                witness = Some(format!("x = {x}, y = {} -> {}", w[0], w[1]));
                break 'mono;
            }
        }
    }
    checks.push(check("f0 nondecreasing in y", witness));

    let c = cfg.dynamics.lipschitz_const;
    let mut witness = (!(c > 0.0 && c.is_finite())).then(|| format!("C_f0 = {c}"));
    if witness.is_none() {
        'lip: for i in 0..n {
            let p = (xs[i], ys[(13 * i + 1) % n]);
            for j in [(i + 1) % n, (17 * i + 29) % n] {
                let q = (xs[j], ys[(41 * j + 7) % n]);
                let d = (p.0 - q.0).abs() + (p.1 - q.1).abs();
                let df = (f0(p.0, p.1) - f0(q.0, q.1)).abs();
                if df > c * d * (1.0 + 1e-12) + 1e-14 {
                    witness = Some(format!("p = {p:?}, q = {q:?}"));
                    break 'lip;
                }
            }
        }
    }
    checks.push(check("f0 Lipschitz", witness));

    let witness = ys
        .iter()
        .filter(|y| **y > 0.0)
        .find(|y| !(f0(0.0, **y) > 0.0))
        .map(|y| format!("f0(0, {y}) = {}", f0(0.0, *y)));
    checks.push(check("f0(0,y)>0", witness));

    // kernel
    let a = &cfg.kernel.samples;
    checks.push(check(
        "a(-T)=0",
        a.first().filter(|v| **v != 0.0).map(|v| format!("a(-T) = {v}")),
    ));
    checks.push(check(
        "a>=0",
        a.iter().position(|v| *v < 0.0).map(|i| format!("a[{i}] = {}", a[i])),
    ));
    let witness = [8.0, 4.0, 2.0]
        .iter()
        .map(|d| cfg.window / d)
        .find(|eps| !(cfg.kernel.mass_near_zero(cfg.window, *eps) > 0.0))
        .map(|eps| format!("no mass on [-{eps}, 0]"));
    checks.push(check("a positive near 0", witness));

    // U1
    let u1 = &cfg.u1;
    let cs = log_grid(1e-6, 1e4, 100);
    let mut witness = None;
    if !u1.u_sup.is_finite() {
        witness = Some(format!("U1 sup = {}", u1.u_sup));
    } else if let Some(c) = cs.iter().find(|c| u1.u(**c) > u1.u_sup + 1e-12) {
        witness = Some(format!("U1({c}) exceeds {}", u1.u_sup));
    }
    checks.push(check("U1 bounded", witness));
    let witness = cs
        .windows(2)
        .find(|w| !(u1.u(w[1]) > u1.u(w[0])))
        .map(|w| format!("U1 not increasing on [{}, {}]", w[0], w[1]));
    checks.push(check("U1 increasing", witness));
    let witness = cs.windows(3).find_map(|w| {
        let s1 = (u1.u(w[1]) - u1.u(w[0])) / (w[1] - w[0]);
        let s2 = (u1.u(w[2]) - u1.u(w[1])) / (w[2] - w[1]);
        (!(s2 < s1 + CONCAVITY_TOL * s1.abs().max(1e-300)) || s2 >= s1)
            .then(|| format!("slopes {s1} -> {s2} at c = {}", w[1]))
    });
    checks.push(check("U1 strictly concave", witness));
    let witness = cs
        .windows(2)
        .find(|w| !(u1.u_prime(w[1]) <= u1.u_prime(w[0]) && u1.u_prime(w[1]) > 0.0))
        .map(|w| format!("U1' not positive decreasing at {}", w[1]));
    checks.push(check("U1' positive decreasing", witness));
    let slope0 = u1.u_prime(1e-8);
    checks.push(check(
        "U1'(0+)=inf",
        (!(slope0 > 1e3)).then(|| format!("U1'(1e-8) = {slope0}")),
    ));

    // U2
    let u2 = &cfg.u2;
    let xs2 = log_grid(1e-4, 1e4, 100);
    let witness = xs2
        .windows(2)
        .find(|w| u2.u(w[1]) < u2.u(w[0]))
        .map(|w| format!("U2 decreases on [{}, {}]", w[0], w[1]));
    checks.push(check("U2 nondecreasing", witness));
    let witness = xs2.windows(3).find_map(|w| {
        let s1 = (u2.u(w[1]) - u2.u(w[0])) / (w[1] - w[0]);
        let s2 = (u2.u(w[2]) - u2.u(w[1])) / (w[2] - w[1]);
        (s2 > s1 + CONCAVITY_TOL * (1.0 + s1.abs()))
            .then(|| format!("slopes {s1} -> {s2} at x = {}", w[1]))
    });
    checks.push(check("U2 concave", witness));
    let witness = (!u2.u_sup.is_finite())
        .then(|| "U2 sup infinite".to_string())
        .or_else(|| {
            xs2.iter()
                .find(|x| u2.u(**x) > u2.u_sup + 1e-12)
                .map(|x| format!("U2({x}) exceeds {}", u2.u_sup))
        });
    checks.push(check("U2 bounded above", witness));
    checks.push(check(
        "U2 integrable along exp(-C t)",
        u2_decay_witness(cfg),
    ));
    if u2.nonintegrable_at_zero {
        checks.push(check("U2 not integrable at 0+", nonintegrable_witness(u2)));
    }
    if u2.strong_blowup {
        checks.push(check("x U2(x) -> -inf", strong_blowup_witness(u2)));
    }

    let witness = xs
        .iter()
        .find(|x| cfg.r * **x + f0(**x, 0.0) < 0.0)
        .map(|x| format!("r x + f0(x, 0) < 0 at x = {x}"));
    let approximation_ready = check("r x + f0(x,0) >= 0", witness);

    ValidationReport { checks, approximation_ready }
}

/// `int_a^b u(x) dx` by trapezoid in `log x` (200 nodes per decade).
pub fn log_trapezoid(u: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let (la, lb) = (a.ln(), b.ln());
    let n = (((lb - la) / std::f64::consts::LN_10) * 200.0).ceil().max(2.0) as usize;
    let h = (lb - la) / n as f64;
    let g: Vec<f64> = (0..=n)
        .map(|i| {
            let x = (la + i as f64 * h).exp();
            u(x) * x
        })
        .collect();
    trapezoid_uniform(&g, h)
}

fn nonintegrable_witness(u2: &StateUtilitySpec) -> Option<String> {
    let u = |x: f64| u2.u(x);
    let total = log_trapezoid(u, 1e-6, 1.0);
    if total < -1e3 {
        return None;
    }
    // logarithmic divergence: per-decade mass does not decay
    let early = log_trapezoid(u, 1e-7, 1e-6).abs();
    let late = log_trapezoid(u, 1e-14, 1e-13).abs();
    if early > 0.0 && late >= 0.5 * early {
        None
    } else {
        Some(format!(
            "int_1e-6^1 U2 = {total}, decade masses {early:e} -> {late:e}"
        ))
    }
}

fn strong_blowup_witness(u2: &StateUtilitySpec) -> Option<String> {
    let vals: Vec<f64> = [1e-6, 1e-9, 1e-12].iter().map(|x| x * u2.u(*x)).collect();
    let decreasing = vals.windows(2).all(|w| w[1] < w[0]);
    if decreasing && vals.iter().any(|v| *v < -1e3) {
        None
    } else {
        Some(format!("x U2(x) at 1e-6, 1e-9, 1e-12: {vals:?}"))
    }
}

fn u2_decay_witness(cfg: &ProblemConfig) -> Option<String> {
    let c = cfg.dynamics.lipschitz_const;
    let g = |t: f64| ((-cfg.rho * t).exp() * cfg.u2.u((-c * t).exp())).abs();
    let vals = [g(40.0), g(80.0), g(160.0)];
    let ok = vals.iter().all(|v| v.is_finite())
        && (vals.iter().all(|v| *v == 0.0) || (vals[2] < vals[1] && vals[1] < vals[0]))
        && vals[2] < 1e-6;
    (!ok).then(|| format!("|e^(-rho t) U2(e^(-C t))| at t = 40, 80, 160: {vals:?}"))
}
