//! Operator network mapping sampled dynamics and safe-set parameters to a
//! control tensor (or, in baseline mode, directly to grid values).
//!
//! The pipeline is: pointwise lift of the input channels plus normalised
//! coordinates, spectral blocks (truncated DFT, per-mode complex channel
//! mixing, inverse DFT, pointwise bypass, GELU except after the last
//! block), pointwise readout to one channel, fixed multilinear resampling
//! onto the control grid, output head, and the ICBC clamp. Gradients are
//! hand-written reverse mode over a tape recorded by [`Model::forward`].

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::ops::Range;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::basis::{BasisSpec, Interval};
use crate::error::{Error, Result};
use crate::format::{fields, parse, read_framed, write_framed};
use crate::stochastic::SystemSpec;
use crate::surrogate::{icbc_entries, ControlTensor, FaceMask, ProblemKind};
use crate::tensor::{apply_along_axis, transpose, unravel};

/// Regular grid over the (x…, t) domain, faces included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub domain: Vec<Interval>,
    pub nodes: Vec<usize>,
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.nodes.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        self.domain[axis].lerp(i as f64 / (self.nodes[axis] - 1) as f64)
    }

    /// Physical coordinates of the node with flat index `flat`.
    pub fn point(&self, flat: usize) -> Vec<f64> {
        let mut idx = vec![0; self.nodes.len()];
        unravel(flat, &self.nodes, &mut idx);
        idx.iter().enumerate().map(|(a, &i)| self.coord(a, i)).collect()
    }
}

/// Input channels sampled on a grid, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct InputField {
    pub channels: usize,
    pub grid: GridSpec,
    pub data: Vec<f64>,
}

/// Drift components at every grid node followed by one constant channel
/// per entry of `alpha`.
pub fn sample_input(system: &SystemSpec, grid: &GridSpec, alpha: &[f64]) -> Result<InputField> {
    let n = system.state_dims();
    if grid.nodes.len() != n + 1 || grid.nodes.iter().any(|&m| m < 2) {
        return Err(Error::Config(format!("input grid needs {} axes with at least 2 nodes", n + 1)));
    }
    let g = grid.len();
    let mut data = vec![0.0; (n + alpha.len()) * g];
    let mut f = vec![0.0; n];
    for flat in 0..g {
        let p = grid.point(flat);
        system.drift.eval_into(&p[..n], p[n], &mut f);
        for (c, v) in f.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidSystem(format!("drift is not finite at {p:?}")));
            }
            data[c * g + flat] = *v;
        }
    }
    for (j, &a) in alpha.iter().enumerate() {
        data[(n + j) * g..(n + j + 1) * g].fill(a);
    }
    Ok(InputField { channels: n + alpha.len(), grid: grid.clone(), data })
}

/// Constant channels only.
pub fn constant_input(values: &[f64], grid: &GridSpec) -> InputField {
    let g = grid.len();
    let data = values.iter().flat_map(|&v| std::iter::repeat_n(v, g)).collect();
    InputField { channels: values.len(), grid: grid.clone(), data }
}

/// Map from resampled readout to control values along the time axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Identity.
    #[default]
    Linear,
    /// Cumulative product of sigmoids along time: control values lie in
    /// `[0, 1]` and are monotone in the time index in the direction the
    /// problem kind requires.
    Monotone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OutputSpec {
    /// Control tensor with `counts` per axis and common `degree`.
    Spline { counts: Vec<usize>, degree: usize, #[serde(default)] head: Head },
    /// Grid values on the feature grid, no clamp.
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Feature grid resolution per axis (x…, t).
    pub grid: Vec<usize>,
    pub width: usize,
    pub blocks: usize,
    pub modes: usize,
    /// Hidden width of the readout; 0 for a single affine map.
    #[serde(default)]
    pub readout_hidden: usize,
    pub output: OutputSpec,
    pub kind: ProblemKind,
    /// Per state axis: whether the low/high face carries the boundary value.
    pub faces: Vec<[bool; 2]>,
}

impl ModelConfig {
    pub fn dims(&self) -> usize {
        self.grid.len()
    }

    pub fn is_baseline(&self) -> bool {
        matches!(self.output, OutputSpec::Grid)
    }

    pub fn face_mask(&self) -> FaceMask {
        FaceMask(self.faces.clone())
    }

    pub fn output_shape(&self) -> Vec<usize> {
        match &self.output {
            OutputSpec::Spline { counts, .. } => counts.clone(),
            OutputSpec::Grid => self.grid.clone(),
        }
    }

    pub fn control_basis(&self, domain: &[Interval]) -> Result<BasisSpec> {
        match &self.output {
            OutputSpec::Spline { counts, degree, .. } => {
                let axes: Vec<_> = counts.iter().zip(domain).map(|(&c, &iv)| (c, *degree, iv)).collect();
                BasisSpec::uniform(&axes)
            }
            OutputSpec::Grid => Err(Error::Config("baseline model has no control basis".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        let bad = |m: String| Err(Error::Config(m));
        if d < 2 || self.faces.len() != d - 1 {
            return bad(format!("need at least one state axis and one face pair per state axis (grid has {d} axes)"));
        }
        if self.width == 0 || self.blocks == 0 || self.modes == 0 || self.in_channels == 0 {
            return bad("width, blocks, modes and in_channels must be positive".into());
        }
        for (a, &m) in self.grid.iter().enumerate() {
            let need = if a + 1 == d { 2 * self.modes } else { 2 * self.modes - 1 };
            if m < need.max(2) {
                return bad(format!("grid axis {a} has {m} nodes, {} modes need at least {need}", self.modes));
            }
        }
        if let OutputSpec::Spline { counts, degree, .. } = &self.output {
            if counts.len() != d || counts.iter().any(|&c| c <= *degree) {
                return bad(format!("control counts {counts:?} must exceed degree {degree} on all {d} axes"));
            }
        }
        Ok(())
    }
}

/// Truncated DFT along one axis.
#[derive(Clone, Debug)]
struct AxisDft {
    k: usize,
    m: usize,
    /// `k × m`, `e^{−2πi k n / m}`.
    fwd: Vec<Complex64>,
    fwd_h: Vec<Complex64>,
    /// `m × k`, `c_k e^{+2πi k n / m}`.
    inv: Vec<Complex64>,
    inv_h: Vec<Complex64>,
}

impl AxisDft {
    fn new(m: usize, modes: usize, last: bool) -> Self {
        let freqs: Vec<i64> = if last {
            (0..modes as i64).collect()
        } else {
            (0..modes as i64).chain(-(modes as i64) + 1..0).collect()
        };
        let k = freqs.len();
        let mut fwd = vec![Complex64::new(0.0, 0.0); k * m];
        let mut inv = vec![Complex64::new(0.0, 0.0); m * k];
        for (r, &f) in freqs.iter().enumerate() {
            let weight = if last && f > 0 { 2.0 } else { 1.0 };
            for n in 0..m {
                let ang = 2.0 * PI * (f * n as i64) as f64 / m as f64;
                fwd[r * m + n] = Complex64::from_polar(1.0, -ang);
                inv[n * k + r] = Complex64::from_polar(weight, ang);
            }
        }
        let conj_t = |a: &[Complex64], rows, cols| transpose(a, rows, cols).into_iter().map(|z| z.conj()).collect();
        let fwd_h = conj_t(&fwd, k, m);
        let inv_h = conj_t(&inv, m, k);
        Self { k, m, fwd, fwd_h, inv, inv_h }
    }
}

#[derive(Clone, Debug)]
struct BlockLayout {
    spectral: Range<usize>,
    bypass_w: Range<usize>,
    bypass_b: Range<usize>,
}

#[derive(Clone, Debug)]
struct Layout {
    lift_w: Range<usize>,
    lift_b: Range<usize>,
    blocks: Vec<BlockLayout>,
    ro_w1: Range<usize>,
    ro_b1: Range<usize>,
    ro_w2: Range<usize>,
    ro_b2: Range<usize>,
    total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig, modes_total: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let (w, cin) = (cfg.width, cfg.in_channels + cfg.dims());
        let lift_w = take(w * cin);
        let lift_b = take(w);
        let blocks = (0..cfg.blocks)
            .map(|_| BlockLayout { spectral: take(2 * w * w * modes_total), bypass_w: take(w * w), bypass_b: take(w) })
            .collect();
        let hid = cfg.readout_hidden;
        let (ro_w1, ro_b1) = if hid > 0 { (take(hid * w), take(hid)) } else { (take(0), take(0)) };
        let ro_w2 = take(if hid > 0 { hid } else { w });
        let ro_b2 = take(1);
        Layout { lift_w, lift_b, blocks, ro_w1, ro_b1, ro_w2, ro_b2, total: at }
    }
}

/// Values recorded by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    lifted_in: Vec<f64>,
    block_in: Vec<Vec<f64>>,
    block_coeffs: Vec<Vec<Complex64>>,
    block_pre: Vec<Vec<f64>>,
    readout_in: Vec<f64>,
    hidden_pre: Vec<f64>,
    head_in: Vec<f64>,
}

/// A configured network with its precomputed transforms.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    layout: Layout,
    dft: Vec<AxisDft>,
    resample: Vec<Vec<f64>>,
    icbc: Vec<(usize, f64)>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out[o, g] = Σ_i w[o, i] x[i, g] + b[o]`.
fn channel_affine(w: &[f64], b: Option<&[f64]>, x: &[f64], out_c: usize, in_c: usize, g: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_c * g];
    for o in 0..out_c {
        let row = &mut out[o * g..(o + 1) * g];
        if let Some(b) = b {
            row.fill(b[o]);
        }
        for i in 0..in_c {
            let wi = w[o * in_c + i];
            if wi == 0.0 {
                continue;
            }
            for (r, &v) in row.iter_mut().zip(&x[i * g..(i + 1) * g]) {
                *r += wi * v;
            }
        }
    }
    out
}

/// Reverse of [`channel_affine`]: accumulates weight and bias gradients,
/// returns the input gradient when requested.
#[allow(clippy::too_many_arguments)]
fn channel_affine_back(
    w: &[f64],
    x: &[f64],
    gy: &[f64],
    out_c: usize,
    in_c: usize,
    g: usize,
    gw: &mut [f64],
    gb: Option<&mut [f64]>,
    want_input: bool,
) -> Option<Vec<f64>> {
    for o in 0..out_c {
        let go = &gy[o * g..(o + 1) * g];
        for i in 0..in_c {
            gw[o * in_c + i] += go.iter().zip(&x[i * g..(i + 1) * g]).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    if let Some(gb) = gb {
        for o in 0..out_c {
            gb[o] += gy[o * g..(o + 1) * g].iter().sum::<f64>();
        }
    }
    if !want_input {
        return None;
    }
    let mut gx = vec![0.0; in_c * g];
    for o in 0..out_c {
        let go = &gy[o * g..(o + 1) * g];
        for i in 0..in_c {
            let wi = w[o * in_c + i];
            if wi == 0.0 {
                continue;
            }
            for (r, &v) in gx[i * g..(i + 1) * g].iter_mut().zip(go) {
                *r += wi * v;
            }
        }
    }
    Some(gx)
}

/// Linear interpolation weights (`rows × m`) from `m` equispaced nodes on
/// `[0, 1]` onto the points `u`.
fn interp_matrix(u: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; u.len() * m];
    for (r, &x) in u.iter().enumerate() {
        let s = x.clamp(0.0, 1.0) * (m - 1) as f64;
        let i = (s.floor() as usize).min(m - 2);
        let frac = s - i as f64;
        out[r * m + i] += 1.0 - frac;
        out[r * m + i + 1] += frac;
    }
    out
}

/// Greville abscissae of a clamped uniform knot vector on `[0, 1]`.
fn greville(count: usize, degree: usize) -> Vec<f64> {
    let spans = (count - degree) as f64;
    let knot = |j: usize| -> f64 {
        if j <= degree {
            0.0
        } else if j >= count {
            1.0
        } else {
            (j - degree) as f64 / spans
        }
    };
    (0..count)
        .map(|i| {
            if degree == 0 {
                (i as f64 + 0.5) / count as f64
            } else {
                (1..=degree).map(|j| knot(i + j)).sum::<f64>() / degree as f64
            }
        })
        .collect()
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dims();
        let dft: Vec<AxisDft> = config.grid.iter().enumerate().map(|(a, &m)| AxisDft::new(m, config.modes, a + 1 == d)).collect();
        let modes_total = dft.iter().map(|t| t.k).product();
        let layout = Layout::new(&config, modes_total);
        let (resample, icbc) = match &config.output {
            OutputSpec::Spline { counts, degree, .. } => {
                let r = counts.iter().zip(&config.grid).map(|(&c, &m)| interp_matrix(&greville(c, *degree), m)).collect();
                let unit: Vec<_> = counts.iter().map(|&c| (c, *degree, Interval { lo: 0.0, hi: 1.0 })).collect();
                let basis = BasisSpec::uniform(&unit)?;
                (r, icbc_entries(&basis, config.kind, &config.face_mask()))
            }
            OutputSpec::Grid => (Vec::new(), Vec::new()),
        };
        Ok(Self { config, layout, dft, resample, icbc })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn output_len(&self) -> usize {
        self.config.output_shape().iter().product()
    }

    /// Flat indices and values fixed by the ICBC clamp (empty in baseline mode).
    pub fn clamped(&self) -> &[(usize, f64)] {
        &self.icbc
    }

    /// Named parameter ranges in storage order.
    pub fn param_names(&self) -> Vec<(String, Range<usize>)> {
        let l = &self.layout;
        let mut out = vec![("lift.weight".to_string(), l.lift_w.clone()), ("lift.bias".to_string(), l.lift_b.clone())];
        for (i, b) in l.blocks.iter().enumerate() {
            out.push((format!("block{i}.spectral"), b.spectral.clone()));
            out.push((format!("block{i}.bypass.weight"), b.bypass_w.clone()));
            out.push((format!("block{i}.bypass.bias"), b.bypass_b.clone()));
        }
        if self.config.readout_hidden > 0 {
            out.push(("readout.hidden.weight".to_string(), l.ro_w1.clone()));
            out.push(("readout.hidden.bias".to_string(), l.ro_b1.clone()));
        }
        out.push(("readout.weight".to_string(), l.ro_w2.clone()));
        out.push(("readout.bias".to_string(), l.ro_b2.clone()));
        out
    }

    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![0.0; self.layout.total];
        let cfg = &self.config;
        let w = cfg.width;
        let uniform = |p: &mut [f64], fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in p.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        };
        let l = &self.layout;
        uniform(&mut p[l.lift_w.clone()], cfg.in_channels + cfg.dims(), &mut rng);
        for b in &l.blocks {
            let scale = 1.0 / (w * w) as f64;
            for v in p[b.spectral.clone()].iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = scale * z;
            }
            uniform(&mut p[b.bypass_w.clone()], w, &mut rng);
        }
        if cfg.readout_hidden > 0 {
            uniform(&mut p[l.ro_w1.clone()], w, &mut rng);
            uniform(&mut p[l.ro_w2.clone()], cfg.readout_hidden, &mut rng);
        } else {
            uniform(&mut p[l.ro_w2.clone()], w, &mut rng);
        }
        p
    }

    fn grid_len(&self) -> usize {
        self.config.grid.iter().product()
    }

    /// Channel-major shape `[channels, grid…]`.
    fn shape_with(&self, channels: usize, spectral: bool) -> Vec<usize> {
        let mut s = vec![channels];
        if spectral {
            s.extend(self.dft.iter().map(|t| t.k));
        } else {
            s.extend(&self.config.grid);
        }
        s
    }

    fn dft_forward(&self, x: &[f64], channels: usize) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let mut shape = self.shape_with(channels, false);
        for (a, t) in self.dft.iter().enumerate() {
            data = apply_along_axis(&data, &shape, a + 1, &t.fwd, t.k);
            shape[a + 1] = t.k;
        }
        data
    }

    /// `Re(IDFT(z)) / M`.
    fn dft_inverse(&self, z: &[Complex64], channels: usize) -> Vec<f64> {
        let mut data = z.to_vec();
        let mut shape = self.shape_with(channels, true);
        for (a, t) in self.dft.iter().enumerate() {
            data = apply_along_axis(&data, &shape, a + 1, &t.inv, t.m);
            shape[a + 1] = t.m;
        }
        let scale = 1.0 / self.grid_len() as f64;
        data.iter().map(|z| z.re * scale).collect()
    }

    /// Adjoint of [`Self::dft_inverse`]: `IDFTᴴ g / M`.
    fn dft_inverse_adjoint(&self, g: &[f64], channels: usize) -> Vec<Complex64> {
        let scale = 1.0 / self.grid_len() as f64;
        let mut data: Vec<Complex64> = g.iter().map(|&v| Complex64::new(v * scale, 0.0)).collect();
        let mut shape = self.shape_with(channels, false);
        for (a, t) in self.dft.iter().enumerate() {
            data = apply_along_axis(&data, &shape, a + 1, &t.inv_h, t.k);
            shape[a + 1] = t.k;
        }
        data
    }

    /// Adjoint of [`Self::dft_forward`] restricted to real inputs: `Re(DFTᴴ g)`.
    fn dft_forward_adjoint(&self, g: &[Complex64], channels: usize) -> Vec<f64> {
        let mut data = g.to_vec();
        let mut shape = self.shape_with(channels, true);
        for (a, t) in self.dft.iter().enumerate() {
            data = apply_along_axis(&data, &shape, a + 1, &t.fwd_h, t.m);
            shape[a + 1] = t.m;
        }
        data.iter().map(|z| z.re).collect()
    }

    fn check_input(&self, input: &InputField) -> Result<()> {
        if input.channels != self.config.in_channels || input.grid.nodes != self.config.grid {
            return Err(Error::Config(format!(
                "input has {} channels on {:?}, model expects {} on {:?}",
                input.channels, input.grid.nodes, self.config.in_channels, self.config.grid
            )));
        }
        if input.data.len() != input.channels * self.grid_len() {
            return Err(Error::Config("input data length does not match its grid".into()));
        }
        Ok(())
    }

    /// Input channels followed by normalised coordinates.
    fn lifted_input(&self, input: &InputField) -> Vec<f64> {
        let g = self.grid_len();
        let d = self.config.dims();
        let mut out = input.data.clone();
        out.reserve(d * g);
        let mut idx = vec![0; d];
        let start = out.len();
        out.resize(start + d * g, 0.0);
        for flat in 0..g {
            unravel(flat, &self.config.grid, &mut idx);
            for a in 0..d {
                out[start + a * g + flat] = idx[a] as f64 / (self.config.grid[a] - 1) as f64;
            }
        }
        out
    }

    /// Output vector (control values or grid values) and the tape.
    pub fn forward(&self, params: &[f64], input: &InputField) -> Result<(Vec<f64>, Tape)> {
        self.check_input(input)?;
        if params.len() != self.layout.total {
            return Err(Error::Config(format!("expected {} parameters, got {}", self.layout.total, params.len())));
        }
        let cfg = &self.config;
        let (w, g, l) = (cfg.width, self.grid_len(), &self.layout);
        let cin = cfg.in_channels + cfg.dims();
        let lifted_in = self.lifted_input(input);
        let mut h = channel_affine(&params[l.lift_w.clone()], Some(&params[l.lift_b.clone()]), &lifted_in, w, cin, g);
        let mut tape = Tape {
            lifted_in,
            block_in: Vec::with_capacity(cfg.blocks),
            block_coeffs: Vec::with_capacity(cfg.blocks),
            block_pre: Vec::with_capacity(cfg.blocks),
            readout_in: Vec::new(),
            hidden_pre: Vec::new(),
            head_in: Vec::new(),
        };
        let k_total: usize = self.dft.iter().map(|t| t.k).product();
        for (bi, b) in l.blocks.iter().enumerate() {
            let coeffs = self.dft_forward(&h, w);
            let spec = &params[b.spectral.clone()];
            let mut mixed = vec![Complex64::new(0.0, 0.0); w * k_total];
            for i in 0..w {
                let xi = &coeffs[i * k_total..(i + 1) * k_total];
                for o in 0..w {
                    let wo = &spec[2 * (i * w + o) * k_total..2 * (i * w + o + 1) * k_total];
                    let zo = &mut mixed[o * k_total..(o + 1) * k_total];
                    for k in 0..k_total {
                        zo[k] += Complex64::new(wo[2 * k], wo[2 * k + 1]) * xi[k];
                    }
                }
            }
            let mut pre = self.dft_inverse(&mixed, w);
            let by = channel_affine(&params[b.bypass_w.clone()], Some(&params[b.bypass_b.clone()]), &h, w, w, g);
            for (p, v) in pre.iter_mut().zip(&by) {
                *p += v;
            }
            let last = bi + 1 == cfg.blocks;
            let next: Vec<f64> = if last { pre.clone() } else { pre.iter().map(|&v| gelu(v)).collect() };
            tape.block_in.push(std::mem::replace(&mut h, next));
            tape.block_coeffs.push(coeffs);
            tape.block_pre.push(pre);
        }
        let r = if cfg.readout_hidden > 0 {
            let hid = cfg.readout_hidden;
            let u = channel_affine(&params[l.ro_w1.clone()], Some(&params[l.ro_b1.clone()]), &h, hid, w, g);
            let q: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
            tape.hidden_pre = u;
            channel_affine(&params[l.ro_w2.clone()], Some(&params[l.ro_b2.clone()]), &q, 1, hid, g)
        } else {
            channel_affine(&params[l.ro_w2.clone()], Some(&params[l.ro_b2.clone()]), &h, 1, w, g)
        };
        tape.readout_in = h;
        let out = match &cfg.output {
            OutputSpec::Grid => r,
            OutputSpec::Spline { counts, head, .. } => {
                let mut data = r;
                let mut shape = cfg.grid.clone();
                for (a, m) in self.resample.iter().enumerate() {
                    data = apply_along_axis(&data, &shape, a, m, counts[a]);
                    shape[a] = counts[a];
                }
                tape.head_in = data.clone();
                let mut c = match head {
                    Head::Linear => data,
                    Head::Monotone => monotone_head(&data, counts, cfg.kind),
                };
                for &(i, v) in &self.icbc {
                    c[i] = v;
                }
                c
            }
        };
        Ok((out, tape))
    }

    /// Control tensor on the physical `domain` (spline mode only).
    pub fn forward_control(&self, params: &[f64], input: &InputField) -> Result<ControlTensor> {
        let basis = self.config.control_basis(&input.grid.domain)?;
        let (out, _) = self.forward(params, input)?;
        ControlTensor::new(basis, out)
    }

    /// Gradient of a scalar loss with respect to the parameters, given its
    /// gradient `upstream` with respect to the forward output.
    pub fn backward(&self, params: &[f64], tape: &Tape, upstream: &[f64]) -> Result<Vec<f64>> {
        if upstream.len() != self.output_len() {
            return Err(Error::Config(format!("upstream has {} entries, output has {}", upstream.len(), self.output_len())));
        }
        let cfg = &self.config;
        let (w, g, l) = (cfg.width, self.grid_len(), &self.layout);
        let mut grads = vec![0.0; l.total];
        // gradient w.r.t. readout output r on the feature grid
        let gr: Vec<f64> = match &cfg.output {
            OutputSpec::Grid => upstream.to_vec(),
            OutputSpec::Spline { counts, head, .. } => {
                let mut gc = upstream.to_vec();
                for &(i, _) in &self.icbc {
                    gc[i] = 0.0;
                }
                let mut data = match head {
                    Head::Linear => gc,
                    Head::Monotone => monotone_head_back(&tape.head_in, &gc, counts, cfg.kind),
                };
                let mut shape = counts.clone();
                for (a, m) in self.resample.iter().enumerate().rev() {
                    let mt = transpose(m, counts[a], cfg.grid[a]);
                    data = apply_along_axis(&data, &shape, a, &mt, cfg.grid[a]);
                    shape[a] = cfg.grid[a];
                }
                data
            }
        };
        let mut gh = if cfg.readout_hidden > 0 {
            let hid = cfg.readout_hidden;
            let q: Vec<f64> = tape.hidden_pre.iter().map(|&v| gelu(v)).collect();
            let (gw2, gb2) = grads[l.ro_w2.start..l.ro_b2.end].split_at_mut(l.ro_w2.len());
            let gq = channel_affine_back(&params[l.ro_w2.clone()], &q, &gr, 1, hid, g, gw2, Some(gb2), true).unwrap();
            let gu: Vec<f64> = gq.iter().zip(&tape.hidden_pre).map(|(a, &u)| a * gelu_grad(u)).collect();
            let (gw1, gb1) = grads[l.ro_w1.start..l.ro_b1.end].split_at_mut(l.ro_w1.len());
            channel_affine_back(&params[l.ro_w1.clone()], &tape.readout_in, &gu, hid, w, g, gw1, Some(gb1), true).unwrap()
        } else {
            let (gw2, gb2) = grads[l.ro_w2.start..l.ro_b2.end].split_at_mut(l.ro_w2.len());
            channel_affine_back(&params[l.ro_w2.clone()], &tape.readout_in, &gr, 1, w, g, gw2, Some(gb2), true).unwrap()
        };
        let k_total: usize = self.dft.iter().map(|t| t.k).product();
        for (bi, b) in l.blocks.iter().enumerate().rev() {
            let last = bi + 1 == cfg.blocks;
            let pre = &tape.block_pre[bi];
            let gpre: Vec<f64> = if last { gh } else { gh.iter().zip(pre).map(|(a, &z)| a * gelu_grad(z)).collect() };
            let x = &tape.block_in[bi];
            let (gbw, gbb) = grads[b.bypass_w.start..b.bypass_b.end].split_at_mut(b.bypass_w.len());
            let mut gx = channel_affine_back(&params[b.bypass_w.clone()], x, &gpre, w, w, g, gbw, Some(gbb), true).unwrap();
            let gz = self.dft_inverse_adjoint(&gpre, w);
            let coeffs = &tape.block_coeffs[bi];
            let spec = &params[b.spectral.clone()];
            let gspec = &mut grads[b.spectral.clone()];
            let mut gcoef = vec![Complex64::new(0.0, 0.0); w * k_total];
            for i in 0..w {
                let xi = &coeffs[i * k_total..(i + 1) * k_total];
                for o in 0..w {
                    let base = 2 * (i * w + o) * k_total;
                    let gzo = &gz[o * k_total..(o + 1) * k_total];
                    for k in 0..k_total {
                        let wio = Complex64::new(spec[base + 2 * k], spec[base + 2 * k + 1]);
                        gcoef[i * k_total + k] += wio.conj() * gzo[k];
                        let gw = xi[k].conj() * gzo[k];
                        gspec[base + 2 * k] += gw.re;
                        gspec[base + 2 * k + 1] += gw.im;
                    }
                }
            }
            let gspectral_in = self.dft_forward_adjoint(&gcoef, w);
            for (a, v) in gx.iter_mut().zip(&gspectral_in) {
                *a += v;
            }
            gh = gx;
        }
        let cin = cfg.in_channels + cfg.dims();
        let (glw, glb) = grads[l.lift_w.start..l.lift_b.end].split_at_mut(l.lift_w.len());
        channel_affine_back(&params[l.lift_w.clone()], &tape.lifted_in, &gh, w, cin, g, glw, Some(glb), false);
        Ok(grads)
    }
}

/// Cumulative sigmoid products along the last axis. Safety:
/// `c_j = Π_{1≤i≤j} s_i`; recovery: `c_j = 1 − Π_{1≤i≤j} (1 − s_i)`.
fn monotone_head(r: &[f64], counts: &[usize], kind: ProblemKind) -> Vec<f64> {
    let lt = *counts.last().expect("nonempty shape");
    let mut out = vec![0.0; r.len()];
    for (row_in, row_out) in r.chunks(lt).zip(out.chunks_mut(lt)) {
        let mut q = 1.0;
        row_out[0] = match kind {
            ProblemKind::Safety => 1.0,
            ProblemKind::Recovery => 0.0,
        };
        for j in 1..lt {
            let s = sigmoid(row_in[j]);
            match kind {
                ProblemKind::Safety => {
                    q *= s;
                    row_out[j] = q;
                }
                ProblemKind::Recovery => {
                    q *= 1.0 - s;
                    row_out[j] = 1.0 - q;
                }
            }
        }
    }
    out
}

fn monotone_head_back(r: &[f64], gc: &[f64], counts: &[usize], kind: ProblemKind) -> Vec<f64> {
    let lt = *counts.last().expect("nonempty shape");
    let mut gr = vec![0.0; r.len()];
    for ((row_in, row_g), row_out) in r.chunks(lt).zip(gc.chunks(lt)).zip(gr.chunks_mut(lt)) {
        // q_j = Π_{i≤j} u_i with u = s (safety) or 1 − s (recovery)
        let sign = match kind {
            ProblemKind::Safety => 1.0,
            ProblemKind::Recovery => -1.0,
        };
        let s: Vec<f64> = row_in.iter().map(|&v| sigmoid(v)).collect();
        let u: Vec<f64> = s.iter().map(|&v| if sign > 0.0 { v } else { 1.0 - v }).collect();
        let mut q = vec![1.0; lt];
        for j in 1..lt {
            q[j] = q[j - 1] * u[j];
        }
        let mut carry = 0.0;
        for j in (1..lt).rev() {
            let gq = sign * row_g[j] + carry;
            let gu = gq * q[j - 1];
            carry = gq * u[j];
            // du/dr = ±s(1 − s)
            row_out[j] = gu * sign * s[j] * (1.0 - s[j]);
        }
    }
    gr
}

/// Parameters plus optional named state tensors, with the model
/// configuration in a text manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub params: Vec<f64>,
    pub extra: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let cfg = toml::to_string(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        let mut header = vec![
            "checkpoint 1".to_string(),
            format!("kind {}", self.config.kind.as_str()),
            format!("seed {}", self.seed),
            format!("epoch {}", self.epoch),
        ];
        header.extend(cfg.lines().filter(|l| !l.trim().is_empty()).map(|l| format!("config {l}")));
        header.push(format!("tensor params {}", self.params.len()));
        let mut data = self.params.clone();
        for (name, t) in &self.extra {
            header.push(format!("tensor {name} {}", t.len()));
            data.extend_from_slice(t);
        }
        write_framed(w, &header, &data)
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let (header, data) = read_framed(r)?;
        let mut it = header.iter();
        let first = it.next().ok_or_else(|| Error::Format("empty checkpoint".into()))?;
        if fields(first, "checkpoint")? != ["1"] {
            return Err(Error::Format("unsupported checkpoint version".into()));
        }
        let (mut seed, mut epoch, mut cfg, mut tensors) = (None, None, String::new(), Vec::new());
        for line in it {
            let (key, rest) = line.split_once(' ').unwrap_or((line.as_str(), ""));
            match key {
                "kind" => {}
                "seed" => seed = Some(parse::<u64>(rest)?),
                "epoch" => epoch = Some(parse::<usize>(rest)?),
                "config" => {
                    cfg.push_str(rest);
                    cfg.push('\n');
                }
                "tensor" => {
                    let f = fields(line, "tensor")?;
                    if f.len() != 2 {
                        return Err(Error::Format(format!("bad tensor line {line:?}")));
                    }
                    tensors.push((f[0].to_string(), parse::<usize>(f[1])?));
                }
                _ => return Err(Error::Format(format!("unknown checkpoint line {line:?}"))),
            }
        }
        let config: ModelConfig = toml::from_str(&cfg).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let total: usize = tensors.iter().map(|(_, n)| n).sum();
        if total != data.len() || tensors.first().map(|(n, _)| n.as_str()) != Some("params") {
            return Err(Error::Format("tensor manifest does not match payload".into()));
        }
        let mut at = 0;
        let mut parts = tensors.into_iter().map(|(name, n)| {
            let t = data[at..at + n].to_vec();
            at += n;
            (name, t)
        });
        let params = parts.next().map(|(_, t)| t).unwrap_or_default();
        let extra = parts.collect();
        Ok(Self {
            config,
            seed: seed.ok_or_else(|| Error::Format("missing seed".into()))?,
            epoch: epoch.ok_or_else(|| Error::Format("missing epoch".into()))?,
            params,
            extra,
        })
    }

    pub fn extra(&self, name: &str) -> Option<&[f64]> {
        self.extra.iter().find(|(n, _)| n == name).map(|(_, t)| t.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic::{Drift, SafeBox};
    use crate::surrogate::apply_icbc_with;

    fn smoke(output: OutputSpec, kind: ProblemKind, hidden: usize) -> Model {
        Model::new(ModelConfig {
            in_channels: 2,
            grid: vec![8, 9],
            width: 8,
            blocks: 2,
            modes: 4,
            readout_hidden: hidden,
            output,
            kind,
            faces: vec![[false, true]],
        })
        .unwrap()
    }

    fn spline(head: Head) -> OutputSpec {
        OutputSpec::Spline { counts: vec![6, 7], degree: 3, head }
    }

    fn unit_grid(nodes: Vec<usize>) -> GridSpec {
        GridSpec { domain: nodes.iter().map(|_| Interval { lo: 0.0, hi: 1.0 }).collect(), nodes }
    }

    fn random_input(model: &Model, seed: u64) -> InputField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = unit_grid(model.config.grid.clone());
        let data = (0..model.config.in_channels * grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        InputField { channels: model.config.in_channels, grid, data }
    }

    #[test]
    fn sampled_channels() {
        let sys = SystemSpec {
            drift: Drift::Constant { value: vec![0.7] },
            sigma: vec![1.0],
            safe_box: SafeBox { lo: vec![4.0], hi: vec![f64::INFINITY] },
            domain: vec![Interval { lo: -10.0, hi: 4.0 }],
            kind: ProblemKind::Recovery,
        };
        let grid = GridSpec { domain: vec![Interval { lo: -10.0, hi: 4.0 }, Interval { lo: 0.0, hi: 10.0 }], nodes: vec![5, 7] };
        let f = sample_input(&sys, &grid, &[4.0]).unwrap();
        assert_eq!(f.channels, 2);
        assert_eq!(f.data.len(), 2 * 35);
        assert!(f.data[..35].iter().all(|&v| v == 0.7));
        assert!(f.data[35..].iter().all(|&v| v == 4.0));
        let c = constant_input(&[1.0, 0.7, 1.5], &unit_grid(vec![4, 4, 5]));
        assert_eq!((c.channels, c.data.len()), (3, 3 * 80));
        assert!(c.data[80..160].iter().all(|&v| v == 0.7));
    }

    #[test]
    fn affine_collapse_gives_constant_interior() {
        let m = smoke(spline(Head::Linear), ProblemKind::Safety, 0);
        let mut p = vec![0.0; m.param_count()];
        p[m.layout.ro_b2.start] = 0.37;
        let (out, _) = m.forward(&p, &random_input(&m, 1)).unwrap();
        let clamped: std::collections::HashMap<usize, f64> = m.clamped().iter().copied().collect();
        for (i, v) in out.iter().enumerate() {
            match clamped.get(&i) {
                Some(c) => assert_eq!(v, c),
                None => assert!((v - 0.37).abs() < 1e-15),
            }
        }
    }

    #[test]
    fn icbc_holds_for_random_parameters() {
        for kind in [ProblemKind::Safety, ProblemKind::Recovery] {
            for head in [Head::Linear, Head::Monotone] {
                let m = smoke(spline(head), kind, 0);
                for seed in 0..5 {
                    let input = random_input(&m, seed);
                    let c = m.forward_control(&m.init_params(seed), &input).unwrap();
                    let again = apply_icbc_with(&c, kind, &m.config.face_mask());
                    assert_eq!(c, again);
                }
            }
        }
    }

    #[test]
    fn monotone_head_is_monotone_and_bounded() {
        for kind in [ProblemKind::Safety, ProblemKind::Recovery] {
            let m = smoke(spline(Head::Monotone), kind, 0);
            let mut p = m.init_params(3);
            for v in p.iter_mut() {
                *v *= 20.0;
            }
            let (out, _) = m.forward(&p, &random_input(&m, 4)).unwrap();
            for row in out.chunks(7) {
                assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
                for w in row.windows(2) {
                    match kind {
                        ProblemKind::Safety => assert!(w[1] <= w[0]),
                        ProblemKind::Recovery => assert!(w[1] >= w[0]),
                    }
                }
            }
        }
    }

    #[test]
    fn mode_zero_spectral_filter_is_the_channel_mean() {
        let m = smoke(spline(Head::Linear), ProblemKind::Safety, 0);
        let w = m.config.width;
        let g = m.grid_len();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h: Vec<f64> = (0..w * g).map(|_| rng.random_range(-1.0..1.0)).collect();
        let coeffs = m.dft_forward(&h, w);
        let k_total = coeffs.len() / w;
        let mut z = vec![Complex64::new(0.0, 0.0); coeffs.len()];
        for c in 0..w {
            z[c * k_total] = coeffs[c * k_total];
        }
        let y = m.dft_inverse(&z, w);
        for c in 0..w {
            let mean = h[c * g..(c + 1) * g].iter().sum::<f64>() / g as f64;
            assert!(y[c * g..(c + 1) * g].iter().all(|v| (v - mean).abs() < 1e-12));
        }
    }

    #[test]
    fn spectral_transforms_are_adjoint() {
        let m = smoke(spline(Head::Linear), ProblemKind::Safety, 0);
        let w = 2;
        let g = m.grid_len();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..w * g).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fx = m.dft_forward(&x, w);
        let z: Vec<Complex64> = fx.iter().map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        // Re<z, F x> = <F*z, x> for real x
        let lhs: f64 = z.iter().zip(&fx).map(|(a, b)| (a.conj() * b).re).sum();
        let rhs: f64 = m.dft_forward_adjoint(&z, w).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
        // <g, Re(G z)/M> = Re<G*g/M, z>
        let gy: Vec<f64> = (0..w * g).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs: f64 = gy.iter().zip(&m.dft_inverse(&z, w)).map(|(a, b)| a * b).sum();
        let rhs: f64 = m.dft_inverse_adjoint(&gy, w).iter().zip(&z).map(|(a, b)| (a.conj() * b).re).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    fn loss_and_grad(m: &Model, p: &[f64], input: &InputField, target: &[f64]) -> (f64, Vec<f64>) {
        let (out, tape) = m.forward(p, input).unwrap();
        let up: Vec<f64> = out.iter().zip(target).map(|(o, t)| o - t).collect();
        let loss = 0.5 * up.iter().map(|v| v * v).sum::<f64>();
        (loss, m.backward(p, &tape, &up).unwrap())
    }

    fn gradient_check(m: &Model) {
        let input = random_input(m, 21);
        let mut p = m.init_params(5);
        // move biases and spectral weights away from their tiny initial scale
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for v in p.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        let target: Vec<f64> = (0..m.output_len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let (_, grad) = loss_and_grad(m, &p, &input, &target);
        for (name, range) in m.param_names() {
            for _ in 0..10 {
                let i = rng.random_range(range.clone());
                let h = 1e-6;
                let mut q = p.clone();
                q[i] += h;
                let (lp, _) = loss_and_grad(m, &q, &input, &target);
                q[i] -= 2.0 * h;
                let (lm, _) = loss_and_grad(m, &q, &input, &target);
                let fd = (lp - lm) / (2.0 * h);
                let err = (fd - grad[i]).abs();
                assert!(err <= 1e-5 * fd.abs().max(grad[i].abs()) + 1e-8, "{name}[{i}]: fd {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        gradient_check(&smoke(spline(Head::Linear), ProblemKind::Safety, 0));
        gradient_check(&smoke(spline(Head::Monotone), ProblemKind::Recovery, 5));
        gradient_check(&smoke(spline(Head::Monotone), ProblemKind::Safety, 0));
        gradient_check(&smoke(OutputSpec::Grid, ProblemKind::Recovery, 0));
    }

    #[test]
    fn three_dimensional_gradients() {
        let m = Model::new(ModelConfig {
            in_channels: 3,
            grid: vec![7, 7, 6],
            width: 4,
            blocks: 2,
            modes: 3,
            readout_hidden: 0,
            output: OutputSpec::Spline { counts: vec![5, 5, 5], degree: 2, head: Head::Linear },
            kind: ProblemKind::Safety,
            faces: vec![[true, true], [true, true]],
        })
        .unwrap();
        gradient_check(&m);
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let m = smoke(spline(Head::Monotone), ProblemKind::Recovery, 4);
        let p = m.init_params(1);
        let (out, tape) = m.forward(&p, &random_input(&m, 2)).unwrap();
        let zero = m.backward(&p, &tape, &vec![0.0; out.len()]).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let up: Vec<f64> = (0..out.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let g1 = m.backward(&p, &tape, &up).unwrap();
        let scaled: Vec<f64> = up.iter().map(|v| 2.5 * v).collect();
        let g2 = m.backward(&p, &tape, &scaled).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.5 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        assert!(matches!(m.backward(&p, &tape, &[0.0; 3]), Err(Error::Config(_))));
    }

    #[test]
    fn initialisation_is_seeded_and_finite() {
        let m = smoke(spline(Head::Linear), ProblemKind::Safety, 0);
        assert_eq!(m.init_params(4), m.init_params(4));
        assert_ne!(m.init_params(4), m.init_params(5));
        for seed in 0..100 {
            let (out, _) = m.forward(&m.init_params(seed), &random_input(&m, seed)).unwrap();
            assert!(out.iter().all(|v| v.is_finite()));
        }
        let p = m.init_params(0);
        assert!(p[m.layout.lift_b.clone()].iter().all(|&v| v == 0.0));
        assert!(p[m.layout.lift_w.clone()].iter().all(|&v| v.abs() <= 1.0 / 4f64.sqrt()));
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let m = smoke(spline(Head::Linear), ProblemKind::Safety, 3);
        let p = m.init_params(7);
        let input = random_input(&m, 7);
        let (a, ta) = m.forward(&p, &input).unwrap();
        let (b, _) = m.forward(&p, &input).unwrap();
        assert_eq!(a, b);
        let up = vec![1.0; a.len()];
        assert_eq!(m.backward(&p, &ta, &up).unwrap(), m.backward(&p, &ta, &up).unwrap());
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let m = smoke(spline(Head::Linear), ProblemKind::Safety, 0);
        let mut input = random_input(&m, 0);
        input.channels = 3;
        assert!(matches!(m.forward(&m.init_params(0), &input), Err(Error::Config(_))));
        let mut cfg = m.config.clone();
        cfg.modes = 5;
        assert!(Model::new(cfg).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = smoke(spline(Head::Monotone), ProblemKind::Recovery, 4);
        let ck = Checkpoint { config: m.config.clone(), seed: 11, epoch: 3, params: m.init_params(11), extra: vec![("adam.m".into(), vec![0.5, -1.0])] };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.extra("adam.m"), Some(&[0.5, -1.0][..]));
        buf.truncate(buf.len() - 1);
        assert!(Checkpoint::read_from(&buf[..]).is_err());
    }

    #[test]
    fn greville_points_span_the_unit_interval() {
        let g = greville(6, 3);
        assert_eq!(g.first(), Some(&0.0));
        assert_eq!(g.last(), Some(&1.0));
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        let r = interp_matrix(&[0.0, 0.5, 1.0], 5);
        assert_eq!(&r[..5], &[1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(&r[5..10], &[0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(&r[10..], &[0.0, 0.0, 0.0, 0.0, 1.0]);
    }
}
