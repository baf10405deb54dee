//! Finite-difference solver for the convection–diffusion equation satisfied
//! by safety and recovery probabilities,
//!
//! `∂F/∂t = f(x, t)·∇F + Σₖ ½σₖ² ∂²F/∂xₖ²`,
//!
//! with `t` the remaining horizon. One state dimension uses Crank–Nicolson,
//! two use Peaceman–Rachford ADI; both start with four implicit half steps
//! to damp the discontinuity where the initial and boundary values meet.
//!
//! Convection is centred where the cell Péclet number `|f|h/D` is at most 2
//! and first-order upwind elsewhere. Domain faces that are not part of the
//! safe-set boundary are moved outwards far enough that the far-field value
//! (the initial value) is not felt inside the original domain.

use std::io::{BufRead, Write};

use crate::basis::Interval;
use crate::error::{Error, Result};
use crate::format::{fields, parse, read_framed, write_framed};
use crate::stochastic::{Drift, SystemSpec};
use crate::surrogate::ProblemKind;

/// Resolution of a solve.
#[derive(Clone, Debug, PartialEq)]
pub struct PdeSettings {
    /// Nodes per state axis on the original domain, faces included.
    pub nodes: Vec<usize>,
    /// Stored time levels, uniformly spaced on `[0, horizon]`.
    pub time_levels: usize,
    /// Time step; chosen from the grid when `None`.
    pub dt: Option<f64>,
}

/// Probability field on a regular space-time grid. Values are row-major
/// with time as the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSolution {
    pub axes: Vec<Interval>,
    pub nodes: Vec<usize>,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub kind: ProblemKind,
}

impl GridSolution {
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        self.axes[axis].lerp(i as f64 / (self.nodes[axis] - 1) as f64)
    }

    /// Value at spatial multi-index `idx` and time level `k`.
    pub fn at(&self, idx: &[usize], k: usize) -> f64 {
        let mut flat = 0;
        for (a, &i) in idx.iter().enumerate() {
            flat = flat * self.nodes[a] + i;
        }
        self.values[flat * self.times.len() + k]
    }

    /// Multilinear interpolation in space and time; `None` outside the grid.
    pub fn value_at(&self, x: &[f64], t: f64) -> Option<f64> {
        let d = self.axes.len();
        let mut cells = Vec::with_capacity(d + 1);
        for (a, &xa) in x.iter().enumerate().take(d) {
            let iv = self.axes[a];
            if !(xa >= iv.lo && xa <= iv.hi) {
                return None;
            }
            let n = self.nodes[a];
            let u = (xa - iv.lo) / iv.width() * (n - 1) as f64;
            let i = (u.floor() as usize).min(n - 2);
            cells.push((i, u - i as f64));
        }
        let nt = self.times.len();
        let (t0, t1) = (self.times[0], self.times[nt - 1]);
        if !(t >= t0 && t <= t1) {
            return None;
        }
        if nt == 1 {
            cells.push((0, 0.0));
        } else {
            let k = self.times.partition_point(|&s| s <= t).clamp(1, nt - 1) - 1;
            cells.push((k, (t - self.times[k]) / (self.times[k + 1] - self.times[k])));
        }
        let mut shape = self.nodes.clone();
        shape.push(nt);
        let mut total = 0.0;
        for corner in 0..(1usize << (d + 1)) {
            let mut w = 1.0;
            let mut flat = 0;
            for (a, &(i, frac)) in cells.iter().enumerate() {
                let up = corner >> a & 1 == 1;
                if up && shape[a] == 1 {
                    w = 0.0;
                    break;
                }
                w *= if up { frac } else { 1.0 - frac };
                flat = flat * shape[a] + i + up as usize;
            }
            if w != 0.0 {
                total += w * self.values[flat];
            }
        }
        Some(total)
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut header = vec![
            "grid-solution 1".to_string(),
            format!("kind {}", self.kind.as_str()),
            format!("dims {}", self.axes.len()),
        ];
        for (iv, n) in self.axes.iter().zip(&self.nodes) {
            header.push(format!("axis {} {:?} {:?}", n, iv.lo, iv.hi));
        }
        let times: Vec<String> = self.times.iter().map(|t| format!("{t:?}")).collect();
        header.push(format!("times {} {}", self.times.len(), times.join(" ")));
        write_framed(w, &header, &self.values)
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let (header, values) = read_framed(r)?;
        let mut lines = header.iter();
        let mut next = |key: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| Error::Format(format!("missing `{key}` line")))?;
            Ok(fields(line, key)?.into_iter().map(str::to_string).collect())
        };
        if next("grid-solution")? != ["1"] {
            return Err(Error::Format("unsupported grid-solution version".into()));
        }
        let kind: ProblemKind = next("kind")?.first().ok_or_else(|| Error::Format("empty kind".into()))?.parse()?;
        let dims: usize = parse(next("dims")?.first().map(String::as_str).unwrap_or(""))?;
        let mut axes = Vec::with_capacity(dims);
        let mut nodes = Vec::with_capacity(dims);
        for _ in 0..dims {
            let f = next("axis")?;
            if f.len() != 3 {
                return Err(Error::Format("axis line needs `nodes lo hi`".into()));
            }
            nodes.push(parse::<usize>(&f[0])?);
            axes.push(Interval::new(parse(&f[1])?, parse(&f[2])?).map_err(|e| Error::Format(e.to_string()))?);
        }
        let f = next("times")?;
        let nt: usize = parse(f.first().map(String::as_str).unwrap_or(""))?;
        let times = f[1..].iter().map(|s| parse::<f64>(s)).collect::<Result<Vec<_>>>()?;
        if times.len() != nt || nt == 0 || nodes.iter().any(|&n| n < 2) {
            return Err(Error::Format("inconsistent grid description".into()));
        }
        if values.len() != nodes.iter().product::<usize>() * nt {
            return Err(Error::Format(format!("expected {} values, got {}", nodes.iter().product::<usize>() * nt, values.len())));
        }
        Ok(Self { axes, nodes, times, values, kind })
    }
}

/// Computational axis: the original domain axis, possibly padded outwards.
#[derive(Clone, Debug)]
struct Axis {
    lo: f64,
    h: f64,
    n: usize,
    offset: usize,
    face_value: [f64; 2],
}

impl Axis {
    fn coord(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.h
    }
}

/// Row `(lower, diag, upper)` of `f ∂ₓ + D ∂ₓₓ` at one node.
fn stencil(f: f64, d: f64, h: f64) -> [f64; 3] {
    let diff = d / (h * h);
    if f.abs() * h > 2.0 * d {
        if f > 0.0 {
            [diff, -2.0 * diff - f / h, diff + f / h]
        } else {
            [diff - f / h, -2.0 * diff + f / h, diff]
        }
    } else {
        [diff - f / (2.0 * h), -2.0 * diff, diff + f / (2.0 * h)]
    }
}

/// Solves a tridiagonal system in place of `rhs`.
fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64], scratch: &mut [f64]) -> Result<()> {
    let n = rhs.len();
    let mut beta = diag[0];
    if !(beta.abs() > 1e-300) {
        return Err(Error::Numerical(format!("zero pivot at row 0 of {n}")));
    }
    rhs[0] /= beta;
    for i in 1..n {
        scratch[i] = upper[i - 1] / beta;
        beta = diag[i] - lower[i] * scratch[i];
        if !(beta.abs() > 1e-300) || !beta.is_finite() {
            return Err(Error::Numerical(format!("zero pivot at row {i} of {n}")));
        }
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i + 1] * rhs[i + 1];
    }
    Ok(())
}

fn is_autonomous(drift: &Drift) -> bool {
    !matches!(drift, Drift::Sine(p) if p.a1 != 0.0 || p.a2 != 0.0)
}

struct Problem<'a> {
    spec: &'a SystemSpec,
    axes: Vec<Axis>,
    shape: Vec<usize>,
    /// Dirichlet value per node, `None` for unknowns.
    fixed: Vec<Option<f64>>,
    diffusion: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn new(spec: &'a SystemSpec, settings: &PdeSettings, horizon: f64) -> Result<Self> {
        spec.validate()?;
        let d = spec.state_dims();
        if d > 2 {
            return Err(Error::InvalidSystem(format!("finite differences support 1 or 2 state dims, got {d}")));
        }
        if settings.nodes.len() != d || settings.nodes.iter().any(|&n| n < 3) {
            return Err(Error::Config(format!("need at least 3 nodes on each of {d} axes")));
        }
        if settings.time_levels < 1 || !(horizon >= 0.0) || !horizon.is_finite() {
            return Err(Error::Config("need a finite horizon and at least one time level".into()));
        }
        let faces = spec.faces();
        let max_f = max_drift(spec, &spec.domain, &settings.nodes, horizon);
        let kind = spec.kind;
        let mut axes = Vec::with_capacity(d);
        for k in 0..d {
            let iv = spec.domain[k];
            let n_orig = settings.nodes[k];
            let h = iv.width() / (n_orig - 1) as f64;
            let pad = 6.0 * spec.sigma[k] * horizon.sqrt() + max_f[k] * horizon;
            let extra = |bc: bool| if bc { 0 } else { (pad / h).ceil() as usize };
            let (el, eh) = (extra(faces.0[k][0]), extra(faces.0[k][1]));
            let value = |bc: bool| if bc { kind.boundary_value() } else { kind.initial_value() };
            axes.push(Axis {
                lo: iv.lo - el as f64 * h,
                h,
                n: n_orig + el + eh,
                offset: el,
                face_value: [value(faces.0[k][0]), value(faces.0[k][1])],
            });
        }
        let shape: Vec<usize> = axes.iter().map(|a| a.n).collect();
        let total: usize = shape.iter().product();
        let mut fixed = vec![None; total];
        let mut idx = vec![0; d];
        for (flat, slot) in fixed.iter_mut().enumerate() {
            crate::tensor::unravel(flat, &shape, &mut idx);
            let mut val: Option<f64> = None;
            for (k, ax) in axes.iter().enumerate() {
                for (side, at) in [(0, 0), (1, ax.n - 1)] {
                    if idx[k] == at {
                        let v = ax.face_value[side];
                        val = Some(match val {
                            Some(prev) if prev == kind.boundary_value() => prev,
                            _ => v,
                        });
                    }
                }
            }
            *slot = val;
        }
        let diffusion = spec.sigma.iter().map(|s| 0.5 * s * s).collect();
        Ok(Self { spec, axes, shape, fixed, diffusion })
    }

    fn choose_steps(&self, settings: &PdeSettings, horizon: f64) -> (usize, usize, f64) {
        let intervals = (settings.time_levels - 1).max(1);
        if horizon == 0.0 {
            return (intervals, 0, 0.0);
        }
        let dt_max = settings.dt.unwrap_or_else(|| {
            let nodes: Vec<usize> = self.axes.iter().map(|a| a.n).collect();
            let ivs: Vec<Interval> = self
                .axes
                .iter()
                .map(|a| Interval { lo: a.lo, hi: a.coord(a.n - 1) })
                .collect();
            let max_f = max_drift(self.spec, &ivs, &nodes, horizon);
            self.axes
                .iter()
                .enumerate()
                .map(|(k, a)| {
                    let s2 = self.spec.sigma[k] * self.spec.sigma[k];
                    a.h * a.h / (s2 + max_f[k] * a.h)
                })
                .fold(f64::INFINITY, f64::min)
        });
        let per = ((horizon / intervals as f64) / dt_max).ceil().max(1.0) as usize;
        let steps = per * intervals;
        (intervals, per, horizon / steps as f64)
    }

    fn initial(&self) -> Vec<f64> {
        let ic = self.spec.kind.initial_value();
        self.fixed.iter().map(|v| v.unwrap_or(ic)).collect()
    }

    /// Per-axis stencil rows at every node for time `t`.
    fn coefficients(&self, t: f64) -> Vec<Vec<[f64; 3]>> {
        let d = self.axes.len();
        let total = self.fixed.len();
        let mut out = vec![vec![[0.0; 3]; total]; d];
        let mut idx = vec![0; d];
        let mut x = vec![0.0; d];
        let mut f = vec![0.0; d];
        for flat in 0..total {
            if self.fixed[flat].is_some() {
                continue;
            }
            crate::tensor::unravel(flat, &self.shape, &mut idx);
            for k in 0..d {
                x[k] = self.axes[k].coord(idx[k]);
            }
            self.spec.drift.eval_into(&x, t, &mut f);
            for k in 0..d {
                out[k][flat] = stencil(f[k], self.diffusion[k], self.axes[k].h);
            }
        }
        out
    }

    /// `u ← u + w·A_axis u` on unknown nodes.
    fn explicit(&self, u: &[f64], coef: &[[f64; 3]], axis: usize, w: f64) -> Vec<f64> {
        let stride: usize = self.shape[axis + 1..].iter().product();
        let mut out = u.to_vec();
        if w == 0.0 {
            return out;
        }
        for (flat, o) in out.iter_mut().enumerate() {
            if self.fixed[flat].is_none() {
                let [a, b, c] = coef[flat];
                *o += w * (a * u[flat - stride] + b * u[flat] + c * u[flat + stride]);
            }
        }
        out
    }

    /// Solves `(I − w·A_axis) u = rhs` line by line along `axis`.
    fn implicit(&self, rhs: &mut [f64], coef: &[[f64; 3]], axis: usize, w: f64) -> Result<()> {
        let n = self.shape[axis];
        let stride: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let m = n - 2;
        let (mut lo, mut di, mut up, mut r, mut scratch) =
            (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        for o in 0..outer {
            for s in 0..stride {
                let base = o * n * stride + s;
                if self.fixed[base + stride].is_some() {
                    continue; // line lies on a face of another axis
                }
                for j in 0..m {
                    let flat = base + (j + 1) * stride;
                    let [a, b, c] = coef[flat];
                    lo[j] = -w * a;
                    di[j] = 1.0 - w * b;
                    up[j] = -w * c;
                    r[j] = rhs[flat];
                }
                r[0] -= lo[0] * rhs[base];
                r[m - 1] -= up[m - 1] * rhs[base + (n - 1) * stride];
                thomas(&lo, &di, &up, &mut r, &mut scratch).map_err(|e| {
                    Error::Numerical(format!("{e} on axis {axis} line {o}/{s}, h = {}", self.axes[axis].h))
                })?;
                for j in 0..m {
                    rhs[base + (j + 1) * stride] = r[j];
                }
            }
        }
        Ok(())
    }

    fn step(&self, u: &mut Vec<f64>, coef: &[Vec<[f64; 3]>], dt: f64, startup: bool) -> Result<()> {
        let d = self.axes.len();
        if startup {
            // two implicit-Euler half steps, split by axis
            for _ in 0..2 {
                for (axis, c) in coef.iter().enumerate() {
                    self.implicit(u, c, axis, 0.5 * dt)?;
                }
            }
            return Ok(());
        }
        if d == 1 {
            let mut rhs = self.explicit(u, &coef[0], 0, 0.5 * dt);
            self.implicit(&mut rhs, &coef[0], 0, 0.5 * dt)?;
            *u = rhs;
        } else {
            let mut half = self.explicit(u, &coef[1], 1, 0.5 * dt);
            self.implicit(&mut half, &coef[0], 0, 0.5 * dt)?;
            let mut full = self.explicit(&half, &coef[0], 0, 0.5 * dt);
            self.implicit(&mut full, &coef[1], 1, 0.5 * dt)?;
            *u = full;
        }
        Ok(())
    }
}

/// Largest |drift| per axis over a grid of the given intervals and a few
/// time samples.
fn max_drift(spec: &SystemSpec, ivs: &[Interval], nodes: &[usize], horizon: f64) -> Vec<f64> {
    let d = ivs.len();
    let shape: Vec<usize> = nodes.to_vec();
    let total: usize = shape.iter().product();
    let mut idx = vec![0; d];
    let mut x = vec![0.0; d];
    let mut f = vec![0.0; d];
    let mut out = vec![0.0f64; d];
    let samples = if is_autonomous(&spec.drift) { 1 } else { 201 };
    for s in 0..samples {
        let t = horizon * s as f64 / (samples.max(2) - 1) as f64;
        for flat in 0..total {
            crate::tensor::unravel(flat, &shape, &mut idx);
            for k in 0..d {
                x[k] = ivs[k].lerp(idx[k] as f64 / (nodes[k] - 1) as f64);
            }
            spec.drift.eval_into(&x, t, &mut f);
            for k in 0..d {
                out[k] = out[k].max(f[k].abs());
            }
        }
    }
    out
}

/// Solves for the safety or recovery probability of a one- or
/// two-dimensional system on its state domain over `[0, horizon]`.
pub fn solve_pde(spec: &SystemSpec, settings: &PdeSettings, horizon: f64) -> Result<GridSolution> {
    let problem = Problem::new(spec, settings, horizon)?;
    let (intervals, per, dt) = problem.choose_steps(settings, horizon);
    let nt = if settings.time_levels == 1 { 1 } else { intervals + 1 };
    let d = problem.axes.len();
    let spatial: usize = settings.nodes.iter().product();
    let mut values = vec![0.0; spatial * nt];
    let mut u = problem.initial();
    let store = |u: &[f64], level: usize, values: &mut [f64]| {
        let mut idx = vec![0; d];
        for s in 0..spatial {
            crate::tensor::unravel(s, &settings.nodes, &mut idx);
            let mut flat = 0;
            for (k, ax) in problem.axes.iter().enumerate() {
                flat = flat * ax.n + idx[k] + ax.offset;
            }
            values[s * nt + level] = u[flat].clamp(0.0, 1.0);
        }
    };
    store(&u, 0, &mut values);
    let autonomous = is_autonomous(&spec.drift);
    let cached = if autonomous { Some(problem.coefficients(0.0)) } else { None };
    let mut step = 0usize;
    for level in 1..nt {
        for _ in 0..per {
            let owned;
            let coef = match &cached {
                Some(c) => c,
                None => {
                    owned = problem.coefficients((step as f64 + 0.5) * dt);
                    &owned
                }
            };
            problem.step(&mut u, coef, dt, step < 2)?;
            step += 1;
        }
        store(&u, level, &mut values);
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite values after {step} steps of dt = {dt}")));
    }
    let times = if nt == 1 { vec![0.0] } else { (0..nt).map(|k| horizon * k as f64 / intervals as f64).collect() };
    Ok(GridSolution { axes: spec.domain.clone(), nodes: settings.nodes.clone(), times, values, kind: spec.kind })
}

/// Safety probability of one decoupled network mode with stiffness
/// `gamma`, damping `beta2`, noise `sigma` and threshold box `[-α, α]²`.
pub fn solve_subsystem_pde(
    gamma: f64,
    beta2: f64,
    sigma: f64,
    alpha: f64,
    settings: &PdeSettings,
    horizon: f64,
) -> Result<GridSolution> {
    let spec = SystemSpec::mode_safety(gamma, 0.0, beta2, sigma, alpha)?;
    solve_pde(&spec, settings, horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic::{recovery_truth, SafeBox, SineParams};
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn settings(nodes: Vec<usize>, levels: usize, dt: Option<f64>) -> PdeSettings {
        PdeSettings { nodes, time_levels: levels, dt }
    }

    fn drift_free() -> SystemSpec {
        SystemSpec::sine_recovery(SineParams::ZERO)
    }

    #[test]
    fn initial_and_boundary_rows_are_exact() {
        let s = solve_pde(&drift_free(), &settings(vec![57], 11, None), 10.0).unwrap();
        let n = s.nodes[0];
        for i in 0..n - 1 {
            assert_eq!(s.at(&[i], 0), 0.0);
        }
        for k in 0..s.times.len() {
            assert_eq!(s.at(&[n - 1], k), 1.0);
        }
        let m = solve_subsystem_pde(2.0, 1.0, 0.2, 1.0, &settings(vec![21, 21], 6, Some(0.05)), 2.0).unwrap();
        for i in 0..21 {
            for j in 0..21 {
                let face = i == 0 || j == 0 || i == 20 || j == 20;
                assert_eq!(m.at(&[i, j], 0), if face { 0.0 } else { 1.0 });
                for k in 1..6 {
                    if face {
                        assert_eq!(m.at(&[i, j], k), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn drift_free_recovery_matches_closed_form() {
        let s = solve_pde(&drift_free(), &settings(vec![141], 101, None), 10.0).unwrap();
        let mut worst = 0.0f64;
        for i in 0..=27 {
            let x = -10.0 + 0.5 * i as f64;
            for k in 1..=100 {
                let t = 0.1 * k as f64;
                let truth = recovery_truth(&SineParams::ZERO, x, t, 1024);
                worst = worst.max((s.value_at(&[x], t).unwrap() - truth).abs());
            }
        }
        assert!(worst <= 0.02, "max error {worst}");
    }

    #[test]
    fn constant_drift_hitting_probability() {
        // first passage of μt + W_t over level a
        let (mu, a) = (-0.3, 1.5);
        let spec = SystemSpec {
            drift: crate::stochastic::Drift::Constant { value: vec![mu] },
            sigma: vec![1.0],
            safe_box: SafeBox { lo: vec![0.0], hi: vec![f64::INFINITY] },
            domain: vec![Interval { lo: -6.0, hi: 0.0 }],
            kind: ProblemKind::Recovery,
        };
        let s = solve_pde(&spec, &settings(vec![241], 21, None), 4.0).unwrap();
        let phi = |z: f64| Normal::new(0.0, 1.0).unwrap().cdf(z);
        for t in [0.5, 1.0, 2.0, 4.0] {
            let truth = phi((mu * t - a) / t.sqrt()) + (2.0 * mu * a).exp() * phi((-a - mu * t) / t.sqrt());
            let got = s.value_at(&[-a], t).unwrap();
            assert!((got - truth).abs() < 5e-3, "t={t}: {got} vs {truth}");
        }
    }

    #[test]
    fn self_convergence_away_from_corner() {
        let spec = drift_free();
        let solve = |n: usize, dt: f64| solve_pde(&spec, &settings(vec![n], 11, Some(dt)), 10.0).unwrap();
        let (a, b, c) = (solve(57, 0.04), solve(113, 0.02), solve(225, 0.01));
        let diff = |u: &GridSolution, v: &GridSolution| {
            let mut m = 0.0f64;
            for i in 0..=24 {
                let x = -10.0 + 0.5 * i as f64;
                for k in 1..=10 {
                    let t = k as f64;
                    m = m.max((u.value_at(&[x], t).unwrap() - v.value_at(&[x], t).unwrap()).abs());
                }
            }
            m
        };
        let (d1, d2) = (diff(&a, &b), diff(&b, &c));
        assert!(d1 / d2 >= 3.0, "refinement ratio {} ({d1} / {d2})", d1 / d2);
    }

    #[test]
    fn mode_solution_is_a_monotone_probability() {
        let s = solve_subsystem_pde(3.0, 1.0, 0.2, 1.0, &settings(vec![41, 41], 21, Some(0.02)), 10.0).unwrap();
        assert!(s.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let mut last = 1.0;
        for k in 0..=20 {
            let f = s.value_at(&[0.0, 0.0], 0.5 * k as f64).unwrap();
            assert!(f <= last + 1e-12);
            last = f;
        }
        assert!(last < 1.0);
    }

    #[test]
    fn time_dependent_drift_reads_the_remaining_horizon() {
        // Drift enters at the remaining horizon, so the field at horizon t
        // is the probability for paths driven by f(t − s) at time s.
        use crate::stochastic::{mc_estimate, Drift};
        use std::f64::consts::PI;
        let p = SineParams { a1: 0.9, a2: -0.4, omega1: 1.5, omega2: 0.7, psi1: 1.0, psi2: 4.0 };
        let spec = SystemSpec::sine_recovery(p);
        let s = solve_pde(&spec, &settings(vec![141], 11, None), 5.0).unwrap();
        let t = 5.0;
        let (k1, k2) = (2.0 * PI * p.omega1 / 10.0, 2.0 * PI * p.omega2 / 10.0);
        let reversed = SineParams { a1: -p.a1, a2: -p.a2, psi1: -k1 * t - p.psi1, psi2: -k2 * t - p.psi2, ..p };
        let mut rev = spec.clone();
        rev.drift = Drift::Sine(reversed);
        for x in [-2.0, 1.0, 3.0] {
            let mc = mc_estimate(&rev, &[x], t, 4000, 1e-3, 11).unwrap();
            let got = s.value_at(&[x], t).unwrap();
            assert!((got - mc.estimate).abs() <= 3.0 * mc.stderr + 0.01, "x={x}: {got} vs {}", mc.estimate);
        }
    }

    #[test]
    fn grid_solution_round_trip_and_lookup() {
        let s = solve_subsystem_pde(2.0, 1.0, 0.2, 1.0, &settings(vec![11, 13], 5, Some(0.05)), 1.0).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let back = GridSolution::read_from(&buf[..]).unwrap();
        assert_eq!(back, s);
        let v = s.value_at(&[s.coord(0, 3), s.coord(1, 5)], s.times[2]).unwrap();
        assert!((v - s.at(&[3, 5], 2)).abs() < 1e-12);
        assert!(s.value_at(&[1.01, 0.0], 0.5).is_none());
        assert!(s.value_at(&[0.0, 0.0], 1.5).is_none());
    }

    #[test]
    fn unsupported_inputs_are_rejected() {
        let mut spec = SystemSpec::mode_safety(1.0, 0.0, 1.0, 0.2, 1.0).unwrap();
        assert!(matches!(solve_pde(&spec, &settings(vec![2, 9], 3, None), 1.0), Err(Error::Config(_))));
        spec.domain.push(Interval { lo: -1.0, hi: 1.0 });
        spec.sigma.push(0.2);
        spec.safe_box = SafeBox { lo: vec![-1.0; 3], hi: vec![1.0; 3] };
        spec.drift = crate::stochastic::Drift::Constant { value: vec![0.0; 3] };
        assert!(matches!(solve_pde(&spec, &settings(vec![9; 3], 3, None), 1.0), Err(Error::InvalidSystem(_))));
    }

    proptest! {
        #[test]
        fn stencil_rows_are_monotone(f in -50.0f64..50.0, d in 1e-3f64..2.0, h in 1e-3f64..0.5) {
            let [a, b, c] = stencil(f, d, h);
            prop_assert!(a >= -1e-12 && c >= -1e-12);
            prop_assert!((a + b + c).abs() <= 1e-9 * (a.abs() + b.abs() + c.abs()));
            // consistency: exact on linear functions
            prop_assert!(((c - a) * h - f).abs() <= 1e-9 * (1.0 + f.abs()));
        }

        #[test]
        fn thomas_matches_dense_solve(seed in 0u64..1000, n in 2usize..12) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let lo: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..0.0)).collect();
            let up: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..0.0)).collect();
            let di: Vec<f64> = (0..n).map(|_| rng.random_range(2.5..4.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut m = nalgebra::DMatrix::zeros(n, n);
            for i in 0..n {
                m[(i, i)] = di[i];
                if i > 0 { m[(i, i - 1)] = lo[i]; }
                if i + 1 < n { m[(i, i + 1)] = up[i]; }
            }
            let dense = m.lu().solve(&nalgebra::DVector::from_vec(b.clone())).unwrap();
            let mut x = b;
            let mut scratch = vec![0.0; n];
            thomas(&lo, &di, &up, &mut x, &mut scratch).unwrap();
            for i in 0..n {
                prop_assert!((x[i] - dense[i]).abs() < 1e-12);
            }
        }
    }
}
