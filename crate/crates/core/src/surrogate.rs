//! Tensor-product spline surfaces `F̂(x, t) = Σ c · B(x) B(t)`.
//!
//! The control tensor is stored row-major with the time axis last. Because
//! the knot vectors are clamped, the outermost control slices are the
//! surface values on the matching faces, which is what lets initial and
//! boundary conditions be written straight into the tensor.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{eval_all, rescale, BasisSpec, Interval};
use crate::error::{Error, Result};
use crate::format;
use crate::quadrature;
use crate::tensor::{apply_along_axis, strides, unravel};

/// Which probability the surface represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    /// Stay inside the safe set: `F(x,0)=1`, `F=0` on the boundary.
    Safety,
    /// Reach the safe set at least once: `F(x,0)=0`, `F=1` on the boundary.
    Recovery,
}

impl ProblemKind {
    pub fn initial_value(self) -> f64 {
        match self {
            ProblemKind::Safety => 1.0,
            ProblemKind::Recovery => 0.0,
        }
    }

    pub fn boundary_value(self) -> f64 {
        match self {
            ProblemKind::Safety => 0.0,
            ProblemKind::Recovery => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProblemKind::Safety => "safety",
            ProblemKind::Recovery => "recovery",
        }
    }
}

impl std::str::FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "safety" => Ok(ProblemKind::Safety),
            "recovery" => Ok(ProblemKind::Recovery),
            other => Err(Error::Format(format!("unknown problem kind {other:?}"))),
        }
    }
}

/// Per state axis, whether the `(lower, upper)` face carries the boundary
/// condition. Faces that only truncate the computational domain are left free.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceMask(pub Vec<[bool; 2]>);

impl FaceMask {
    pub fn all(state_dims: usize) -> Self {
        Self(vec![[true, true]; state_dims])
    }

    pub fn state_dims(&self) -> usize {
        self.0.len()
    }
}

/// Dense control-point tensor of shape `ℓ₁ × … × ℓ_n × ℓ_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlTensor {
    values: Vec<f64>,
    basis: BasisSpec,
}

impl ControlTensor {
    pub fn new(basis: BasisSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != basis.total_len() {
            return Err(Error::Config(format!(
                "control tensor has {} values, basis {:?} needs {}",
                values.len(),
                basis.counts(),
                basis.total_len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite control point".into()));
        }
        Ok(Self { values, basis })
    }

    pub fn constant(basis: BasisSpec, value: f64) -> Self {
        let n = basis.total_len();
        Self { values: vec![value; n], basis }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    pub fn shape(&self) -> Vec<usize> {
        self.basis.counts()
    }

    /// Value at `(x, t)`.
    pub fn value_at(&self, x: &[f64], t: f64) -> Result<f64> {
        let st = point_stencil(&self.basis, x, t, 0)?;
        Ok(st.dot_value(&self.values))
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut header = vec!["control-tensor 1".to_string(), format!("dims {}", self.basis.dims())];
        header.extend(axis_header_lines(&self.basis));
        format::write_framed(w, &header, &self.values)
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let (header, data) = format::read_framed(r)?;
        let mut lines = header.iter();
        let magic = lines.next().ok_or_else(|| Error::Format("empty header".into()))?;
        if magic != "control-tensor 1" {
            return Err(Error::Format(format!("not a control tensor: {magic:?}")));
        }
        let dims_line = lines.next().ok_or_else(|| Error::Format("missing dims".into()))?;
        let dims: usize = format::parse(format::fields(dims_line, "dims")?.first().copied().unwrap_or(""))?;
        let basis = parse_axis_lines(&mut lines, dims)?;
        Self::new(basis, data)
    }
}

pub(crate) fn axis_header_lines(basis: &BasisSpec) -> Vec<String> {
    basis
        .axes()
        .iter()
        .map(|a| {
            format!(
                "axis {} {} {} {}",
                a.knots.count(),
                a.knots.degree(),
                a.domain.lo,
                a.domain.hi
            )
        })
        .collect()
}

pub(crate) fn parse_axis_lines<'a>(
    lines: &mut impl Iterator<Item = &'a String>,
    dims: usize,
) -> Result<BasisSpec> {
    let mut axes = Vec::with_capacity(dims);
    for _ in 0..dims {
        let line = lines.next().ok_or_else(|| Error::Format("missing axis line".into()))?;
        let f = format::fields(line, "axis")?;
        if f.len() != 4 {
            return Err(Error::Format(format!("axis line needs 4 fields: {line:?}")));
        }
        let count: usize = format::parse(f[0])?;
        let degree: usize = format::parse(f[1])?;
        let domain = Interval::new(format::parse(f[2])?, format::parse(f[3])?)?;
        axes.push((count, degree, domain));
    }
    BasisSpec::uniform(&axes)
}

/// Value and derivatives of the surface at one point, in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfacePartials {
    pub value: f64,
    pub dt: f64,
    pub grad_x: Vec<f64>,
    pub hess_diag: Vec<f64>,
}

/// Sparse weights turning a control tensor into the surface value and its
/// partial derivatives at one point. Everything is linear in the tensor.
#[derive(Clone, Debug)]
pub struct PointStencil {
    pub indices: Vec<usize>,
    pub value: Vec<f64>,
    /// Present only when derivatives were requested.
    pub dt: Vec<f64>,
    pub grad: Vec<Vec<f64>>,
    pub hess: Vec<Vec<f64>>,
}

impl PointStencil {
    pub fn dot_value(&self, c: &[f64]) -> f64 {
        self.indices.iter().zip(&self.value).map(|(&i, w)| c[i] * w).sum()
    }

    fn dot(&self, weights: &[f64], c: &[f64]) -> f64 {
        self.indices.iter().zip(weights).map(|(&i, w)| c[i] * w).sum()
    }
}

/// Build the stencil at `(x, t)`; `max_order` is 0 (value only) or 2
/// (value, time derivative, state gradient and diagonal Hessian).
pub fn point_stencil(basis: &BasisSpec, x: &[f64], t: f64, max_order: usize) -> Result<PointStencil> {
    let dims = basis.dims();
    if x.len() + 1 != dims {
        return Err(Error::Config(format!(
            "point has {} state coordinates, basis has {} state axes",
            x.len(),
            dims - 1
        )));
    }
    let shape = basis.counts();
    let stride = strides(&shape);
    // per axis: (first index, rows of derivative values, jacobian)
    let mut local = Vec::with_capacity(dims);
    for (a, axis) in basis.axes().iter().enumerate() {
        let coord = if a + 1 == dims { t } else { x[a] };
        let (u, jac) = rescale(coord, axis.domain)?;
        let orders = if a + 1 == dims { max_order.min(1) } else { max_order };
        let (first, rows) = axis.knots.local_derivatives(u, orders)?;
        local.push((first, rows, jac));
    }
    let widths: Vec<usize> = local.iter().map(|(_, r, _)| r[0].len()).collect();
    let block: usize = widths.iter().product();
    let n_state = dims - 1;
    let mut st = PointStencil {
        indices: Vec::with_capacity(block),
        value: Vec::with_capacity(block),
        dt: Vec::new(),
        grad: vec![Vec::new(); if max_order > 0 { n_state } else { 0 }],
        hess: vec![Vec::new(); if max_order > 1 { n_state } else { 0 }],
    };
    let mut j = vec![0usize; dims];
    for flat in 0..block {
        unravel(flat, &widths, &mut j);
        let mut idx = 0;
        let mut base = 1.0;
        for a in 0..dims {
            idx += (local[a].0 + j[a]) * stride[a];
            base *= local[a].1[0][j[a]];
        }
        st.indices.push(idx);
        st.value.push(base);
        if max_order == 0 {
            continue;
        }
        // derivative along one axis: swap that axis's factor
        let others = |skip: usize| -> f64 {
            (0..dims).filter(|&a| a != skip).map(|a| local[a].1[0][j[a]]).product()
        };
        let ta = dims - 1;
        st.dt.push(local[ta].1[1][j[ta]] * local[ta].2 * others(ta));
        for a in 0..n_state {
            let rest = others(a);
            let jac = local[a].2;
            st.grad[a].push(local[a].1[1][j[a]] * jac * rest);
            if max_order > 1 {
                st.hess[a].push(local[a].1[2][j[a]] * jac * jac * rest);
            }
        }
    }
    Ok(st)
}

/// Value, time derivative, state gradient and diagonal state Hessian of the
/// surface at `(x, t)`, all with respect to physical coordinates.
pub fn eval_surface(c: &ControlTensor, x: &[f64], t: f64) -> Result<SurfacePartials> {
    let st = point_stencil(&c.basis, x, t, 2)?;
    let v = &c.values;
    Ok(SurfacePartials {
        value: st.dot_value(v),
        dt: st.dot(&st.dt, v),
        grad_x: st.grad.iter().map(|w| st.dot(w, v)).collect(),
        hess_diag: st.hess.iter().map(|w| st.dot(w, v)).collect(),
    })
}

/// Flat indices of the control points fixed by the initial and boundary
/// conditions, with their values. Boundary faces win over the initial slice.
pub fn icbc_entries(basis: &BasisSpec, kind: ProblemKind, faces: &FaceMask) -> Vec<(usize, f64)> {
    let shape = basis.counts();
    let dims = shape.len();
    let n_state = dims - 1;
    let total: usize = shape.iter().product();
    let mut out = Vec::new();
    let mut idx = vec![0usize; dims];
    for flat in 0..total {
        unravel(flat, &shape, &mut idx);
        let on_face = (0..n_state.min(faces.state_dims())).any(|a| {
            (idx[a] == 0 && faces.0[a][0]) || (idx[a] + 1 == shape[a] && faces.0[a][1])
        });
        if on_face {
            out.push((flat, kind.boundary_value()));
        } else if idx[dims - 1] == 0 {
            out.push((flat, kind.initial_value()));
        }
    }
    out
}

/// Clamp the initial slice and every state face to the kind's constants.
pub fn apply_icbc(c: &ControlTensor, kind: ProblemKind) -> ControlTensor {
    apply_icbc_with(c, kind, &FaceMask::all(c.basis.dims() - 1))
}

/// As [`apply_icbc`], clamping only the faces selected in `faces`.
pub fn apply_icbc_with(c: &ControlTensor, kind: ProblemKind, faces: &FaceMask) -> ControlTensor {
    let mut out = c.clone();
    for (i, v) in icbc_entries(&c.basis, kind, faces) {
        out.values[i] = v;
    }
    out
}

/// Per-axis Gauss–Legendre nodes and weights on `[0, 1]`, `per_span` per knot span.
fn axis_rules(basis: &BasisSpec, per_span: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    basis.axes().iter().map(|a| quadrature::composite(a.knots.knots(), per_span)).collect()
}

/// `M[i][q] = w_q B_i(u_q)` for one axis.
fn weighted_basis_matrix(basis: &BasisSpec, axis: usize, nodes: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    let kv = &basis.axes()[axis].knots;
    let l = kv.count();
    let q = nodes.len();
    let mut m = vec![0.0; l * q];
    for (k, (&u, &w)) in nodes.iter().zip(weights).enumerate() {
        for (i, b) in eval_all(kv, u)?.into_iter().enumerate() {
            m[i * q + k] = w * b;
        }
    }
    Ok(m)
}

/// Target sampled on the tensor quadrature grid (physical coordinates).
fn sample_on_rule<F: Fn(&[f64]) -> f64>(target: &F, basis: &BasisSpec, rules: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
    let shape: Vec<usize> = rules.iter().map(|r| r.0.len()).collect();
    let total: usize = shape.iter().product();
    let domains = basis.domains();
    let mut idx = vec![0usize; shape.len()];
    let mut point = vec![0.0; shape.len()];
    (0..total)
        .map(|flat| {
            unravel(flat, &shape, &mut idx);
            for a in 0..shape.len() {
                point[a] = domains[a].lerp(rules[a].0[idx[a]]);
            }
            target(&point)
        })
        .collect()
}

/// Inner products `⟨g, φ_i⟩` of a sampled field with every tensor basis
/// function, using the quadrature weights in normalized coordinates.
fn project_rhs(samples: &[f64], basis: &BasisSpec, rules: &[(Vec<f64>, Vec<f64>)]) -> Result<Vec<f64>> {
    let mut shape: Vec<usize> = rules.iter().map(|r| r.0.len()).collect();
    let mut acc = samples.to_vec();
    for (a, (nodes, weights)) in rules.iter().enumerate() {
        let m = weighted_basis_matrix(basis, a, nodes, weights)?;
        let rows = basis.axes()[a].knots.count();
        acc = apply_along_axis(&acc, &shape, a, &m, rows);
        shape[a] = rows;
    }
    Ok(acc)
}

/// Best `L²` approximation of `target` in the spline space of `basis`.
///
/// The Gram matrix of a tensor-product basis is the Kronecker product of the
/// per-axis Gram matrices, so the normal equations are solved one axis at a
/// time with a Cholesky factor per axis. Per-axis Gram entries use `d + 1`
/// Gauss–Legendre points per knot span (exact for the polynomial products);
/// the right-hand side uses `per_span` points per span.
pub fn l2_project<F: Fn(&[f64]) -> f64>(target: F, basis: &BasisSpec, per_span: usize) -> Result<ControlTensor> {
    if per_span < 4 {
        return Err(Error::InvalidSpec(format!(
            "quadrature needs at least 4 points per knot span, got {per_span}"
        )));
    }
    let rules = axis_rules(basis, per_span);
    let samples = sample_on_rule(&target, basis, &rules);
    let mut coef = project_rhs(&samples, basis, &rules)?;
    let shape = basis.counts();
    for (a, axis) in basis.axes().iter().enumerate() {
        let gram = axis_gram(basis, a)?;
        let l = axis.knots.count();
        let chol = gram.cholesky().ok_or_else(|| {
            Error::Conditioning(format!("Gram matrix of axis {a} (ℓ={l}) is not positive definite"))
        })?;
        let inv = chol.inverse();
        let inv_rows: Vec<f64> = (0..l).flat_map(|r| (0..l).map(move |c| (r, c))).map(|(r, c)| inv[(r, c)]).collect();
        coef = apply_along_axis(&coef, &shape, a, &inv_rows, l);
    }
    ControlTensor::new(basis.clone(), coef)
}

/// Gram matrix `G_ij = ∫ B_i B_j du` of one axis on `[0, 1]`.
pub fn axis_gram(basis: &BasisSpec, axis: usize) -> Result<DMatrix<f64>> {
    let kv = &basis.axes()[axis].knots;
    let (nodes, weights) = quadrature::composite(kv.knots(), kv.degree() + 1);
    let l = kv.count();
    let mut g = DMatrix::zeros(l, l);
    for (&u, &w) in nodes.iter().zip(&weights) {
        let b = DVector::from_vec(eval_all(kv, u)?);
        g += w * &b * b.transpose();
    }
    Ok(g)
}

/// Quadrature `L²` norm of `target − F̂` over the normalized domain.
pub fn l2_residual<F: Fn(&[f64]) -> f64>(target: F, c: &ControlTensor, per_span: usize) -> Result<f64> {
    let (err, _) = residual_parts(&target, c, per_span)?;
    Ok(err)
}

/// Inner products `⟨target − F̂, φ_i⟩` under the `per_span` quadrature.
pub fn residual_inner_products<F: Fn(&[f64]) -> f64>(target: F, c: &ControlTensor, per_span: usize) -> Result<Vec<f64>> {
    let (_, ip) = residual_parts(&target, c, per_span)?;
    Ok(ip)
}

fn residual_parts<F: Fn(&[f64]) -> f64>(target: &F, c: &ControlTensor, per_span: usize) -> Result<(f64, Vec<f64>)> {
    let basis = &c.basis;
    let rules = axis_rules(basis, per_span);
    let domains = basis.domains();
    let dims = basis.dims();
    let samples = sample_on_rule(target, basis, &rules);
    let shape: Vec<usize> = rules.iter().map(|r| r.0.len()).collect();
    let mut idx = vec![0usize; dims];
    let mut sq = 0.0;
    let mut diff = Vec::with_capacity(samples.len());
    for (flat, g) in samples.iter().enumerate() {
        unravel(flat, &shape, &mut idx);
        let mut w = 1.0;
        let mut p = vec![0.0; dims];
        for a in 0..dims {
            w *= rules[a].1[idx[a]];
            p[a] = domains[a].lerp(rules[a].0[idx[a]]);
        }
        let fit = c.value_at(&p[..dims - 1], p[dims - 1])?;
        sq += w * (g - fit) * (g - fit);
        diff.push(g - fit);
    }
    let ip = project_rhs(&diff, basis, &rules)?;
    Ok((sq.sqrt(), ip))
}
