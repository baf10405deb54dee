//! Physics and data losses over the network output, collocation sampling,
//! Adam, and the training loop with resumable checkpoints.
//!
//! Every loss term is a sparse linear functional of the output vector (control
//! values in spline mode, grid values in baseline mode), so the gradient with
//! respect to the output is assembled directly and handed to
//! [`Model::backward`].

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, Interval};
use crate::error::{Error, Result};
use crate::functional::{sample_input, Checkpoint, GridSpec, InputField, Model, ModelConfig, OutputSpec};
use crate::stochastic::SystemSpec;
use crate::surrogate::{icbc_entries, point_stencil, SurfacePartials};
use crate::tensor::{strides, unravel};

/// `∂F/∂t − f·∇F − Σ_k ½σ_k² ∂²F/∂x_k²`.
pub fn pde_residual(partials: &SurfacePartials, f: &[f64], sigma: &[f64]) -> f64 {
    let conv: f64 = f.iter().zip(&partials.grad_x).map(|(a, b)| a * b).sum();
    let diff: f64 = sigma.iter().zip(&partials.hess_diag).map(|(s, h)| 0.5 * s * s * h).sum();
    partials.dt - conv - diff
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_w_icbc() -> f64 {
    10.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Config("parameter, gradient and moment lengths differ".into()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            epoch: state.step as usize,
            detail: format!("gradient entry {i} is {} at step {}", grads[i], state.step + 1),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= hyper.lr * mh / (vh.sqrt() + hyper.eps);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(flatten)]
    pub adam: AdamHyper,
    pub w_p: f64,
    pub w_d: f64,
    /// Soft initial/boundary penalty, baseline mode only.
    #[serde(default = "default_w_icbc")]
    pub w_icbc: f64,
    /// Collocation points per epoch (spline mode).
    pub collocation: usize,
    pub seed: u64,
    /// Records per update; 0 for full batch.
    #[serde(default)]
    pub batch_size: usize,
    /// Replace the spline output by grid values with soft conditions.
    #[serde(default)]
    pub baseline: bool,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.w_p >= 0.0 && self.w_d >= 0.0 && self.w_icbc >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.w_p == 0.0 && self.w_d == 0.0 {
            return bad("w_p and w_d cannot both be zero");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.adam.lr > 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("learning rate must be positive and Adam betas in [0, 1)");
        }
        if self.w_p > 0.0 && self.collocation == 0 && !self.baseline {
            return bad("physics loss needs at least one collocation point");
        }
        self.model_config().validate()
    }

    /// Model configuration with the baseline flag applied.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if self.baseline {
            m.output = OutputSpec::Grid;
        }
        m
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// One system with target probabilities at evaluation points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub system: SystemSpec,
    /// Safe-set parameters fed to the network as constant channels.
    pub alpha: Vec<f64>,
    pub horizon: f64,
    /// Flat `(x…, t)` tuples.
    pub points: Vec<f64>,
    pub targets: Vec<f64>,
    pub split: Split,
}

impl Record {
    pub fn domain(&self) -> Vec<Interval> {
        let mut d = self.system.domain.clone();
        d.push(Interval { lo: 0.0, hi: self.horizon });
        d
    }

    pub fn point_count(&self) -> usize {
        self.targets.len()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let d = self.system.state_dims() + 1;
        &self.points[i * d..(i + 1) * d]
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        let d = self.system.state_dims() + 1;
        if !(self.horizon > 0.0) || self.points.len() != d * self.targets.len() {
            return Err(Error::Config("record needs a positive horizon and one target per point".into()));
        }
        if let Some(v) = self.targets.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("target {v} outside [0, 1]")));
        }
        let dom = self.domain();
        for p in self.points.chunks(d) {
            for (v, iv) in p.iter().zip(&dom) {
                if !iv.contains(*v) {
                    return Err(Error::Domain { value: *v, lo: iv.lo, hi: iv.hi });
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.records.iter().try_for_each(Record::validate)
    }
}

/// Sparse linear functional of the output vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sparse {
    pub idx: Vec<usize>,
    pub w: Vec<f64>,
}

impl Sparse {
    pub fn dot(&self, v: &[f64]) -> f64 {
        self.idx.iter().zip(&self.w).map(|(&i, w)| v[i] * w).sum()
    }

    fn scatter(&self, scale: f64, out: &mut [f64]) {
        for (&i, w) in self.idx.iter().zip(&self.w) {
            out[i] += scale * w;
        }
    }
}

/// Uniform i.i.d. points strictly inside the boxes `region`, reproducible
/// from `seed`.
pub fn sample_collocation(region: &[Interval], count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            region
                .iter()
                .map(|iv| loop {
                    let v = rng.random_range(iv.lo..iv.hi);
                    if v > iv.lo {
                        break v;
                    }
                })
                .collect()
        })
        .collect()
}

/// Unit-cube region for collocation: one knot span (spline mode) or one grid
/// cell (baseline) away from every clamped face and from `t = 0`.
pub fn collocation_region(cfg: &ModelConfig) -> Vec<Interval> {
    let d = cfg.dims();
    let span = |a: usize| match &cfg.output {
        OutputSpec::Spline { counts, degree, .. } => 1.0 / (counts[a] - degree) as f64,
        OutputSpec::Grid => 1.0 / (cfg.grid[a] - 1) as f64,
    };
    (0..d)
        .map(|a| {
            let (lo_clamped, hi_clamped) = if a + 1 == d { (true, false) } else { (cfg.faces[a][0], cfg.faces[a][1]) };
            Interval {
                lo: if lo_clamped { span(a) } else { 0.0 },
                hi: if hi_clamped { 1.0 - span(a) } else { 1.0 },
            }
        })
        .collect()
}

fn collocation_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Multilinear interpolation weights on a regular grid.
fn grid_interp(grid: &GridSpec, p: &[f64]) -> Result<Sparse> {
    let st = strides(&grid.nodes);
    let mut base = 0;
    let mut axes = Vec::with_capacity(p.len());
    for (a, (&v, iv)) in p.iter().zip(&grid.domain).enumerate() {
        if !iv.contains(v) {
            return Err(Error::Domain { value: v, lo: iv.lo, hi: iv.hi });
        }
        let m = grid.nodes[a];
        let s = (v - iv.lo) / iv.width() * (m - 1) as f64;
        let i = (s.floor() as usize).min(m - 2);
        base += i * st[a];
        axes.push((s - i as f64, st[a]));
    }
    let mut out = Sparse::default();
    for corner in 0..1usize << axes.len() {
        let mut w = 1.0;
        let mut idx = base;
        for (a, &(frac, stride)) in axes.iter().enumerate() {
            if corner >> a & 1 == 1 {
                w *= frac;
                idx += stride;
            } else {
                w *= 1.0 - frac;
            }
        }
        if w != 0.0 {
            out.idx.push(idx);
            out.w.push(w);
        }
    }
    Ok(out)
}

/// Residual of the finite-difference generator at an interior grid node.
fn grid_residual(grid: &GridSpec, flat: usize, f: &[f64], sigma: &[f64]) -> Sparse {
    let d = grid.nodes.len();
    let st = strides(&grid.nodes);
    let h: Vec<f64> = (0..d).map(|a| grid.domain[a].width() / (grid.nodes[a] - 1) as f64).collect();
    let mut out = Sparse::default();
    let mut push = |i: usize, w: f64| {
        out.idx.push(i);
        out.w.push(w);
    };
    let t = d - 1;
    push(flat + st[t], 0.5 / h[t]);
    push(flat - st[t], -0.5 / h[t]);
    for a in 0..t {
        let c = f[a] * 0.5 / h[a];
        let q = 0.5 * sigma[a] * sigma[a] / (h[a] * h[a]);
        push(flat + st[a], -c - q);
        push(flat - st[a], c - q);
        push(flat, 2.0 * q);
    }
    out
}

/// Per-record data prepared once for a model configuration.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub input: InputField,
    domain: Vec<Interval>,
    basis: Option<BasisSpec>,
    system: SystemSpec,
    data: Vec<(Sparse, f64)>,
    /// Baseline mode: residual rows at interior nodes and soft ICBC rows.
    grid_physics: Vec<Sparse>,
    grid_icbc: Vec<(usize, f64)>,
}

impl Prepared {
    pub fn new(model: &Model, record: &Record) -> Result<Self> {
        record.validate()?;
        let cfg = &model.config;
        let n = record.system.state_dims();
        if n + 1 != cfg.dims() {
            return Err(Error::Config(format!("record has {n} state axes, model expects {}", cfg.dims() - 1)));
        }
        if record.system.kind != cfg.kind {
            return Err(Error::Config(format!(
                "{} model cannot use {} data",
                cfg.kind.as_str(),
                record.system.kind.as_str()
            )));
        }
        let domain = record.domain();
        let grid = GridSpec { domain: domain.clone(), nodes: cfg.grid.clone() };
        let input = sample_input(&record.system, &grid, &record.alpha)?;
        if input.channels != cfg.in_channels {
            return Err(Error::Config(format!("record yields {} channels, model expects {}", input.channels, cfg.in_channels)));
        }
        let mut out = Self {
            input,
            domain: domain.clone(),
            basis: None,
            system: record.system.clone(),
            data: Vec::with_capacity(record.point_count()),
            grid_physics: Vec::new(),
            grid_icbc: Vec::new(),
        };
        if cfg.is_baseline() {
            for i in 0..record.point_count() {
                out.data.push((grid_interp(&grid, record.point(i))?, record.targets[i]));
            }
            let mut idx = vec![0; cfg.dims()];
            let mut f = vec![0.0; n];
            for flat in 0..grid.len() {
                unravel(flat, &grid.nodes, &mut idx);
                if idx.iter().zip(&grid.nodes).all(|(&i, &m)| i > 0 && i + 1 < m) {
                    let p = grid.point(flat);
                    record.system.drift.eval_into(&p[..n], p[n], &mut f);
                    out.grid_physics.push(grid_residual(&grid, flat, &f, &record.system.sigma));
                }
            }
            let nodes: Vec<_> = cfg.grid.iter().map(|&m| (m, 1, Interval { lo: 0.0, hi: 1.0 })).collect();
            out.grid_icbc = icbc_entries(&BasisSpec::uniform(&nodes)?, cfg.kind, &cfg.face_mask());
        } else {
            let basis = cfg.control_basis(&domain)?;
            for i in 0..record.point_count() {
                let p = record.point(i);
                let st = point_stencil(&basis, &p[..n], p[n], 0)?;
                out.data.push((Sparse { idx: st.indices, w: st.value }, record.targets[i]));
            }
            out.basis = Some(basis);
        }
        Ok(out)
    }

    /// Residual rows at unit-cube collocation points (spline mode).
    fn physics_rows(&self, colloc: &[Vec<f64>]) -> Result<Vec<Sparse>> {
        let Some(basis) = &self.basis else {
            return Ok(self.grid_physics.clone());
        };
        let n = self.domain.len() - 1;
        let mut f = vec![0.0; n];
        colloc
            .iter()
            .map(|u| {
                let p: Vec<f64> = u.iter().zip(&self.domain).map(|(&u, iv)| iv.lerp(u)).collect();
                let st = point_stencil(basis, &p[..n], p[n], 2)?;
                self.system.drift.eval_into(&p[..n], p[n], &mut f);
                let mut w = st.dt.clone();
                for k in 0..n {
                    let q = 0.5 * self.system.sigma[k] * self.system.sigma[k];
                    for j in 0..w.len() {
                        w[j] -= f[k] * st.grad[k][j] + q * st.hess[k][j];
                    }
                }
                Ok(Sparse { idx: st.indices, w })
            })
            .collect()
    }

    /// Predicted probabilities at the record's evaluation points.
    pub fn predict(&self, out: &[f64]) -> Vec<f64> {
        self.data.iter().map(|(s, _)| s.dot(out)).collect()
    }
}

/// Loss components; `icbc` is zero outside baseline mode.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub physics: f64,
    pub data: f64,
    pub icbc: f64,
}

#[derive(Clone, Copy, Debug, Default)]
struct Sums {
    physics: f64,
    data: f64,
    icbc: f64,
    n_physics: usize,
    n_data: usize,
    n_icbc: usize,
}

fn record_sums(p: &Prepared, out: &[f64], rows: &[Sparse]) -> Sums {
    let mut s = Sums::default();
    for r in rows {
        s.physics += r.dot(out).powi(2);
    }
    s.n_physics = rows.len();
    for (r, y) in &p.data {
        s.data += (r.dot(out) - y).powi(2);
    }
    s.n_data = p.data.len();
    for &(i, v) in &p.grid_icbc {
        s.icbc += (out[i] - v).powi(2);
    }
    s.n_icbc = p.grid_icbc.len();
    s
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Loss over `batch` and its gradient with respect to the parameters.
/// `colloc` holds unit-cube points; it is ignored in baseline mode, which
/// uses every interior grid node instead.
pub fn total_loss(
    model: &Model,
    params: &[f64],
    batch: &[&Prepared],
    colloc: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<(LossParts, Vec<f64>)> {
    let baseline = model.config.is_baseline();
    if cfg.w_p > 0.0 && colloc.is_empty() && !baseline {
        return Err(Error::Config("empty collocation set with w_p > 0".into()));
    }
    let per: Vec<Result<(Vec<f64>, Vec<Sparse>, Sums, crate::functional::Tape)>> = batch
        .par_iter()
        .map(|p| {
            let (out, tape) = model.forward(params, &p.input)?;
            let rows = if cfg.w_p > 0.0 { p.physics_rows(colloc)? } else { Vec::new() };
            let s = record_sums(p, &out, &rows);
            Ok((out, rows, s, tape))
        })
        .collect();
    let per: Vec<_> = per.into_iter().collect::<Result<_>>()?;
    let mut tot = Sums::default();
    for (_, _, s, _) in &per {
        tot.physics += s.physics;
        tot.data += s.data;
        tot.icbc += s.icbc;
        tot.n_physics += s.n_physics;
        tot.n_data += s.n_data;
        tot.n_icbc += s.n_icbc;
    }
    let w_icbc = if baseline { cfg.w_icbc } else { 0.0 };
    let lp = mean(tot.physics, tot.n_physics);
    let ld = mean(tot.data, tot.n_data);
    let li = mean(tot.icbc, tot.n_icbc);
    let parts = LossParts { total: cfg.w_p * lp + cfg.w_d * ld + w_icbc * li, physics: lp, data: ld, icbc: li };
    let sp = if tot.n_physics > 0 { 2.0 * cfg.w_p / tot.n_physics as f64 } else { 0.0 };
    let sd = if tot.n_data > 0 { 2.0 * cfg.w_d / tot.n_data as f64 } else { 0.0 };
    let si = if tot.n_icbc > 0 { 2.0 * w_icbc / tot.n_icbc as f64 } else { 0.0 };
    let grads: Vec<Result<Vec<f64>>> = per
        .par_iter()
        .zip(batch.par_iter())
        .map(|((out, rows, _, tape), p)| {
            let mut up = vec![0.0; out.len()];
            for r in rows {
                r.scatter(sp * r.dot(out), &mut up);
            }
            for (r, y) in &p.data {
                r.scatter(sd * (r.dot(out) - y), &mut up);
            }
            for &(i, v) in &p.grid_icbc {
                up[i] += si * (out[i] - v);
            }
            model.backward(params, tape, &up)
        })
        .collect();
    let mut grad = vec![0.0; params.len()];
    for g in grads {
        for (a, b) in grad.iter_mut().zip(g?) {
            *a += b;
        }
    }
    Ok((parts, grad))
}

/// Mean squared data error over `records` without gradients.
pub fn data_loss(model: &Model, params: &[f64], records: &[&Prepared]) -> Result<f64> {
    let sums: Vec<Result<(f64, usize)>> = records
        .par_iter()
        .map(|p| {
            let (out, _) = model.forward(params, &p.input)?;
            let s = p.data.iter().map(|(r, y)| (r.dot(&out) - y).powi(2)).sum::<f64>();
            Ok((s, p.data.len()))
        })
        .collect();
    let (mut s, mut n) = (0.0, 0);
    for r in sums {
        let (a, b) = r?;
        s += a;
        n += b;
    }
    Ok(mean(s, n))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub physics: f64,
    pub data: f64,
    pub wall_ms: f64,
}

pub const HISTORY_HEADER: &str = "epoch,L,L_p,L_d,wall_ms";

impl EpochStats {
    pub fn csv_row(&self) -> String {
        format!("{},{:e},{:e},{:e},{:.3}", self.epoch, self.loss, self.physics, self.data, self.wall_ms)
    }
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub best: Checkpoint,
    /// Carries optimizer state and the best parameters for resumption.
    pub last: Checkpoint,
    pub history: Vec<EpochStats>,
}

/// Training stopped early; `history` covers the completed epochs.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct TrainAbort {
    pub error: Error,
    pub history: Vec<EpochStats>,
}

impl From<Error> for TrainAbort {
    fn from(error: Error) -> Self {
        Self { error, history: Vec::new() }
    }
}

impl From<TrainAbort> for Error {
    fn from(a: TrainAbort) -> Self {
        a.error
    }
}

const ADAM_M: &str = "adam.m";
const ADAM_V: &str = "adam.v";
const ADAM_STEP: &str = "adam.step";
const BEST_PARAMS: &str = "best.params";
const BEST_SCORE: &str = "best.score";
const BEST_EPOCH: &str = "best.epoch";

/// Run `cfg.epochs` epochs in total, continuing from `resume` when given.
/// The best checkpoint minimises the validation data loss when validation
/// records exist and the training loss otherwise.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, resume: Option<&Checkpoint>) -> std::result::Result<TrainRun, TrainAbort> {
    cfg.validate()?;
    let model = Model::new(cfg.model_config())?;
    let prep = |split| -> Result<Vec<Prepared>> { dataset.split(split).into_iter().map(|r| Prepared::new(&model, r)).collect() };
    let train_set = prep(Split::Train)?;
    let val_set = prep(Split::Validation)?;
    if train_set.is_empty() {
        return Err(Error::Config("no training records".into()).into());
    }
    let np = model.param_count();
    let (mut params, mut state, start, mut best) = match resume {
        None => (model.init_params(cfg.seed), AdamState::new(np), 0, (f64::INFINITY, Vec::new(), 0)),
        Some(ck) => {
            if ck.config != model.config || ck.params.len() != np {
                return Err(Error::Config("checkpoint does not match the configured model".into()).into());
            }
            let get = |n: &str| ck.extra(n).ok_or_else(|| Error::Format(format!("checkpoint lacks {n}")));
            let state = AdamState { m: get(ADAM_M)?.to_vec(), v: get(ADAM_V)?.to_vec(), step: get(ADAM_STEP)?[0] as u64 };
            let best = (get(BEST_SCORE)?[0], get(BEST_PARAMS)?.to_vec(), get(BEST_EPOCH)?[0] as usize);
            (ck.params.clone(), state, ck.epoch, best)
        }
    };
    if best.1.is_empty() {
        best.1 = params.clone();
    }
    let region = collocation_region(&model.config);
    let mut history = Vec::with_capacity(cfg.epochs.saturating_sub(start));
    let abort = |error: Error, history: &Vec<EpochStats>| TrainAbort { error, history: history.clone() };
    for epoch in start..cfg.epochs {
        let t0 = Instant::now();
        let before = if val_set.is_empty() { Some(params.clone()) } else { None };
        let eseed = collocation_seed(cfg.seed, epoch);
        let colloc = if model.config.is_baseline() { Vec::new() } else { sample_collocation(&region, cfg.collocation, eseed) };
        let mut order: Vec<&Prepared> = train_set.iter().collect();
        let bs = if cfg.batch_size == 0 { order.len() } else { cfg.batch_size };
        if bs < order.len() {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(eseed));
        }
        let (mut s, mut n) = (LossParts::default(), 0.0);
        for batch in order.chunks(bs) {
            let (parts, grad) = total_loss(&model, &params, batch, &colloc, cfg).map_err(|e| abort(e, &history))?;
            if !parts.total.is_finite() {
                let detail = format!("loss {} (physics {}, data {})", parts.total, parts.physics, parts.data);
                return Err(abort(Error::Diverged { epoch, detail }, &history));
            }
            adam_step(&mut params, &grad, &mut state, &cfg.adam).map_err(|e| match e {
                Error::Diverged { detail, .. } => abort(Error::Diverged { epoch, detail }, &history),
                e => abort(e, &history),
            })?;
            let w = batch.len() as f64;
            s.total += w * parts.total;
            s.physics += w * parts.physics;
            s.data += w * parts.data;
            n += w;
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: s.total / n,
            physics: s.physics / n,
            data: s.data / n,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        // the training loss belongs to the parameters at the start of the epoch
        let (score, scored) = match before {
            Some(p) => (stats.loss, p),
            None => {
                let refs: Vec<&Prepared> = val_set.iter().collect();
                (data_loss(&model, &params, &refs).map_err(|e| abort(e, &history))?, params.clone())
            }
        };
        if score < best.0 {
            best = (score, scored, epoch + 1);
        }
        history.push(stats);
    }
    let ck = |p: &[f64], epoch: usize, extra| Checkpoint { config: model.config.clone(), seed: cfg.seed, epoch, params: p.to_vec(), extra };
    let extra = vec![
        (ADAM_M.to_string(), state.m.clone()),
        (ADAM_V.to_string(), state.v.clone()),
        (ADAM_STEP.to_string(), vec![state.step as f64]),
        (BEST_PARAMS.to_string(), best.1.clone()),
        (BEST_SCORE.to_string(), vec![best.0]),
        (BEST_EPOCH.to_string(), vec![best.2 as f64]),
    ];
    Ok(TrainRun {
        best: ck(&best.1, best.2, Vec::new()),
        last: ck(&params, cfg.epochs.max(start), extra),
        history,
    })
}

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 0.05;

/// Pointwise error summary of predictions against targets.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    /// Mean of `|F̂ − F| / max(|F|, REL_FLOOR)`.
    pub rel_err: f64,
    pub count: usize,
}

impl Metrics {
    pub fn new(pred: &[f64], target: &[f64]) -> Self {
        let mut m = Self { count: pred.len().min(target.len()), ..Self::default() };
        for (p, y) in pred.iter().zip(target) {
            let e = p - y;
            m.mse += e * e;
            m.mae += e.abs();
            m.rel_err += e.abs() / y.abs().max(REL_FLOOR);
        }
        let n = m.count.max(1) as f64;
        m.mse /= n;
        m.mae /= n;
        m.rel_err /= n;
        m
    }

    /// Point-weighted mean of several summaries.
    pub fn pooled(parts: &[Metrics]) -> Self {
        let n: usize = parts.iter().map(|m| m.count).sum();
        let w = |f: fn(&Metrics) -> f64| parts.iter().map(|m| f(m) * m.count as f64).sum::<f64>() / n.max(1) as f64;
        Self { mse: w(|m| m.mse), mae: w(|m| m.mae), rel_err: w(|m| m.rel_err), count: n }
    }
}
