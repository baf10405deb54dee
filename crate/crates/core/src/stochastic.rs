//! Monte Carlo and closed-form references for safety and recovery
//! probabilities of `dx = f(x, t) dt + σ dW`.
//!
//! Trajectories are simulated with Euler–Maruyama and checked against the
//! safe region after every step (discrete monitoring, no bridge
//! correction). Every trajectory owns a counter-based ChaCha substream, so
//! estimates do not depend on how trajectories are scheduled on workers.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::Interval;
use crate::error::{Error, Result};
use crate::surrogate::{FaceMask, ProblemKind};

/// Safe-set level of the scalar recovery problem: the safe set is `x >= 4`.
pub const RECOVERY_THRESHOLD: f64 = 4.0;

/// `A₁ sin(2π ω₁ t/10 + ψ₁) + A₂ sin(2π ω₂ t/10 + ψ₂)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineParams {
    pub a1: f64,
    pub a2: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub psi1: f64,
    pub psi2: f64,
}

impl SineParams {
    pub const ZERO: SineParams = SineParams { a1: 0.0, a2: 0.0, omega1: 1.0, omega2: 1.0, psi1: 0.0, psi2: 0.0 };

    fn terms(&self) -> [(f64, f64, f64); 2] {
        [(self.a1, self.omega1, self.psi1), (self.a2, self.omega2, self.psi2)]
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.terms()
            .iter()
            .map(|&(a, w, psi)| a * (2.0 * PI * w * t / 10.0 + psi).sin())
            .sum()
    }
}

/// Drift families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Drift {
    /// Constant vector field.
    Constant { value: Vec<f64> },
    /// Scalar time-only sine family.
    Sine(SineParams),
    /// `f(x) = H x` with `H` row-major `n × n`.
    Linear { n: usize, h: Vec<f64> },
    /// Decoupled mode of the mass-spring-damper network:
    /// `(p, v) ↦ (v, −(β₁ + λ) p − β₂ v)`.
    Mode { beta1: f64, lambda: f64, beta2: f64 },
}

impl Drift {
    /// State dimension the drift acts on, if it fixes one.
    pub fn dim(&self) -> Option<usize> {
        match self {
            Drift::Constant { value } => Some(value.len()),
            Drift::Sine(_) => Some(1),
            Drift::Linear { n, .. } => Some(*n),
            Drift::Mode { .. } => Some(2),
        }
    }

    pub fn eval_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        match self {
            Drift::Constant { value } => out.copy_from_slice(value),
            Drift::Sine(p) => out[0] = p.eval(t),
            Drift::Linear { n, h } => {
                for (i, o) in out.iter_mut().enumerate().take(*n) {
                    *o = h[i * n..(i + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum();
                }
            }
            Drift::Mode { beta1, lambda, beta2 } => {
                out[0] = x[1];
                out[1] = -(beta1 + lambda) * x[0] - beta2 * x[1];
            }
        }
    }

    pub fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.eval_into(x, t, &mut out);
        out
    }
}

/// Axis-aligned safe box; bounds may be infinite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafeBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SafeBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
            return Err(Error::InvalidSystem("safe box must be nonempty in every dimension".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn from_intervals(iv: &[Interval]) -> Self {
        Self { lo: iv.iter().map(|i| i.lo).collect(), hi: iv.iter().map(|i| i.hi).collect() }
    }
}

/// Region membership used by the Monte Carlo estimators.
pub trait SafeRegion: Sync {
    /// Strictly inside (the boundary counts as exited).
    fn contains_open(&self, x: &[f64]) -> bool;
    /// Inside or on the boundary.
    fn contains_closed(&self, x: &[f64]) -> bool;
}

impl SafeRegion for SafeBox {
    fn contains_open(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| v > l && v < h)
    }

    fn contains_closed(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| v >= l && v <= h)
    }
}

/// A stochastic system together with its safe set, the state domain on
/// which surfaces are represented, and the probability being asked for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub drift: Drift,
    pub sigma: Vec<f64>,
    pub safe_box: SafeBox,
    pub domain: Vec<Interval>,
    pub kind: ProblemKind,
}

impl SystemSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.domain.len();
        if n == 0 {
            return Err(Error::InvalidSystem("state dimension is zero".into()));
        }
        if self.sigma.len() != n || self.safe_box.lo.len() != n {
            return Err(Error::InvalidSystem(format!(
                "dimension mismatch: domain {n}, sigma {}, safe box {}",
                self.sigma.len(),
                self.safe_box.lo.len()
            )));
        }
        if let Some(d) = self.drift.dim() {
            if d != n {
                return Err(Error::InvalidSystem(format!("drift acts on {d} dims, domain has {n}")));
            }
        }
        if self.sigma.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidSystem("noise magnitudes must be finite and nonnegative".into()));
        }
        SafeBox::new(self.safe_box.lo.clone(), self.safe_box.hi.clone())?;
        Ok(())
    }

    pub fn state_dims(&self) -> usize {
        self.domain.len()
    }

    /// A domain face carries the boundary condition when it lies on a
    /// finite bound of the safe box.
    pub fn faces(&self) -> FaceMask {
        FaceMask(
            self.domain
                .iter()
                .enumerate()
                .map(|(k, iv)| {
                    let on = |v: f64| v.is_finite() && (v == self.safe_box.lo[k] || v == self.safe_box.hi[k]);
                    [on(iv.lo), on(iv.hi)]
                })
                .collect(),
        )
    }

    /// Scalar recovery problem with sine drift, unit noise, safe set
    /// `x >= 4` and state domain `[-10, 4]`.
    pub fn sine_recovery(params: SineParams) -> Self {
        Self {
            drift: Drift::Sine(params),
            sigma: vec![1.0],
            safe_box: SafeBox { lo: vec![RECOVERY_THRESHOLD], hi: vec![f64::INFINITY] },
            domain: vec![Interval { lo: -10.0, hi: RECOVERY_THRESHOLD }],
            kind: ProblemKind::Recovery,
        }
    }

    /// One decoupled network mode: safety on the box `[-α, α]²`.
    pub fn mode_safety(beta1: f64, lambda: f64, beta2: f64, sigma: f64, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidSystem(format!("threshold must be positive, got {alpha}")));
        }
        let iv = Interval::new(-alpha, alpha)?;
        Ok(Self {
            drift: Drift::Mode { beta1, lambda, beta2 },
            sigma: vec![sigma, sigma],
            safe_box: SafeBox::from_intervals(&[iv, iv]),
            domain: vec![iv, iv],
            kind: ProblemKind::Safety,
        })
    }

    pub fn sine_params(&self) -> Option<SineParams> {
        match self.drift {
            Drift::Sine(p) => Some(p),
            _ => None,
        }
    }
}

/// Random member of the sine family; with probability one half the second
/// term is switched off.
pub fn random_sine_dynamics(seed: u64) -> SystemSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = SineParams {
        a1: rng.random_range(-1.0..1.0),
        a2: rng.random_range(-1.0..1.0),
        omega1: rng.random_range(0.5..2.0),
        omega2: rng.random_range(0.5..2.0),
        psi1: rng.random_range(0.0..2.0 * PI),
        psi2: rng.random_range(0.0..2.0 * PI),
    };
    if rng.random_bool(0.5) {
        p.a2 = 0.0;
    }
    SystemSpec::sine_recovery(p)
}

/// `S(t) = ∫₀ᵗ f(τ) dτ` in closed form.
pub fn integrated_drift(params: &SineParams, t: f64) -> f64 {
    params
        .terms()
        .iter()
        .map(|&(a, w, psi)| {
            let k = 2.0 * PI * w / 10.0;
            a / k * (psi.cos() - (k * t + psi).cos())
        })
        .sum()
}

/// `S(t)` by the composite trapezoid rule.
pub fn integrated_drift_trapezoid(params: &SineParams, t: f64, panels: usize) -> f64 {
    let h = t / panels as f64;
    let inner: f64 = (1..panels).map(|j| params.eval(j as f64 * h)).sum();
    h * (0.5 * (params.eval(0.0) + params.eval(t)) + inner)
}

/// Default number of trapezoid panels for [`recovery_truth`].
pub const RECOVERY_PANELS: usize = 4096;

/// Recovery probability of the scalar sine system (unit noise, safe set
/// `x >= 4`) from the cumulative hitting-time density
/// `(4−x)/√(2πτ³) · exp(−((4−x) − S(τ))² / 2τ)`.
///
/// The integral is taken over `s = √τ`, where the density turns into the
/// bounded integrand `2(4−x)/√(2π) · s⁻² · exp(−((4−x) − S(s²))² / 2s²)`
/// that vanishes at `s = 0`; the composite trapezoid rule then resolves the
/// early-time peak for starting points close to the boundary.
pub fn recovery_truth(params: &SineParams, x: f64, t: f64, panels: usize) -> f64 {
    let gap = RECOVERY_THRESHOLD - x;
    if gap <= 0.0 {
        return 1.0;
    }
    if t <= 0.0 {
        return 0.0;
    }
    let s_max = t.sqrt();
    let h = s_max / panels as f64;
    let c = 2.0 * gap / (2.0 * PI).sqrt();
    let g = |s: f64| -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        let tau = s * s;
        let m = gap - integrated_drift(params, tau);
        c / tau * (-m * m / (2.0 * tau)).exp()
    };
    let inner: f64 = (1..panels).map(|j| g(j as f64 * h)).sum();
    let total = h * (0.5 * (g(0.0) + g(s_max)) + inner);
    total.clamp(0.0, 1.0)
}

/// Monte Carlo estimate with its binomial standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McResult {
    pub estimate: f64,
    pub stderr: f64,
    pub trajectories: usize,
    pub dt: f64,
}

impl McResult {
    fn from_count(hits: usize, m: usize, dt: f64) -> Self {
        let p = hits as f64 / m as f64;
        Self { estimate: p, stderr: (p * (1.0 - p) / m as f64).sqrt(), trajectories: m, dt }
    }
}

/// Settings shared by the Monte Carlo routines.
#[derive(Clone, Copy, Debug)]
pub struct McSettings {
    pub trajectories: usize,
    pub dt: f64,
    pub seed: u64,
}

/// Step index at which each trajectory first leaves the open region
/// (`Safety`) or first touches the closed region (`Recovery`); `None` if
/// that never happens within `steps` steps. Index 0 is the initial state.
pub fn event_steps<R: SafeRegion>(
    drift: &Drift,
    sigma: &[f64],
    region: &R,
    kind: ProblemKind,
    x0: &[f64],
    steps: usize,
    mc: McSettings,
) -> Vec<Option<usize>> {
    let n = x0.len();
    let sq = mc.dt.sqrt();
    let hit = |x: &[f64]| match kind {
        ProblemKind::Safety => !region.contains_open(x),
        ProblemKind::Recovery => region.contains_closed(x),
    };
    (0..mc.trajectories)
        .into_par_iter()
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
            rng.set_stream(j as u64);
            let mut x = x0.to_vec();
            let mut f = vec![0.0; n];
            if hit(&x) {
                return Some(0);
            }
            for step in 0..steps {
                let t = step as f64 * mc.dt;
                drift.eval_into(&x, t, &mut f);
                for k in 0..n {
                    let xi: f64 = rng.sample(StandardNormal);
                    x[k] += f[k] * mc.dt + sigma[k] * sq * xi;
                }
                if hit(&x) {
                    return Some(step + 1);
                }
            }
            None
        })
        .collect()
}

fn steps_for(horizon: f64, dt: f64) -> usize {
    (horizon / dt).round() as usize
}

/// Probability estimate at step `k` from per-trajectory event steps.
pub fn estimate_at(events: &[Option<usize>], kind: ProblemKind, k: usize, dt: f64) -> McResult {
    let happened = events.iter().filter(|e| matches!(e, Some(s) if *s <= k)).count();
    let count = match kind {
        ProblemKind::Safety => events.len() - happened,
        ProblemKind::Recovery => happened,
    };
    McResult::from_count(count, events.len(), dt)
}

/// Monte Carlo estimate of the system's safety or recovery probability
/// from `x0` over `[0, horizon]`.
pub fn mc_estimate(spec: &SystemSpec, x0: &[f64], horizon: f64, m: usize, dt: f64, seed: u64) -> Result<McResult> {
    spec.validate()?;
    if m == 0 || !(dt > 0.0) {
        return Err(Error::Config("need at least one trajectory and dt > 0".into()));
    }
    let steps = steps_for(horizon, dt);
    let mc = McSettings { trajectories: m, dt, seed };
    let ev = event_steps(&spec.drift, &spec.sigma, &spec.safe_box, spec.kind, x0, steps, mc);
    Ok(estimate_at(&ev, spec.kind, steps, dt))
}

/// Estimates at each of `times` (ascending) from one nested set of paths.
pub fn mc_curve<R: SafeRegion>(
    drift: &Drift,
    sigma: &[f64],
    region: &R,
    kind: ProblemKind,
    x0: &[f64],
    times: &[f64],
    mc: McSettings,
) -> Vec<McResult> {
    let last = times.iter().fold(0.0f64, |m, &t| m.max(t));
    let ev = event_steps(drift, sigma, region, kind, x0, steps_for(last, mc.dt), mc);
    times.iter().map(|&t| estimate_at(&ev, kind, steps_for(t, mc.dt), mc.dt)).collect()
}

/// One Euler–Maruyama path sampled at every step (including `x0`).
pub fn simulate_path<G: Rng>(drift: &Drift, sigma: &[f64], x0: &[f64], steps: usize, dt: f64, rng: &mut G) -> Vec<Vec<f64>> {
    let n = x0.len();
    let sq = dt.sqrt();
    let mut out = Vec::with_capacity(steps + 1);
    let mut x = x0.to_vec();
    let mut f = vec![0.0; n];
    out.push(x.clone());
    for step in 0..steps {
        drift.eval_into(&x, step as f64 * dt, &mut f);
        for k in 0..n {
            let xi: f64 = rng.sample(StandardNormal);
            x[k] += f[k] * dt + sigma[k] * sq * xi;
        }
        out.push(x.clone());
    }
    out
}
