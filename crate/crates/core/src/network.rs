//! Networks of identical mass-spring-damper agents coupled through a graph
//! Laplacian, their decomposition into independent two-dimensional modes,
//! and the product formula that recombines per-mode safety probabilities.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pde::GridSolution;
use crate::stochastic::{Drift, SafeRegion, SystemSpec};
use crate::surrogate::ControlTensor;

/// Seven-agent interaction graph used throughout the network examples.
pub const REFERENCE_LAPLACIAN: [[f64; 7]; 7] = [
    [5.0, -1.0, -1.0, -1.0, -1.0, -1.0, 0.0],
    [-1.0, 3.0, 0.0, -1.0, 0.0, 0.0, -1.0],
    [-1.0, 0.0, 2.0, 0.0, -1.0, 0.0, 0.0],
    [-1.0, -1.0, 0.0, 4.0, -1.0, -1.0, 0.0],
    [-1.0, 0.0, -1.0, -1.0, 4.0, -1.0, 0.0],
    [-1.0, 0.0, 0.0, -1.0, -1.0, 3.0, 0.0],
    [0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
];

/// Agent dynamics `dx = (A x + B u) dt + σ dW` with `A = [[0, 1], [−β₁, −β₂]]`,
/// `B = [0, 1]ᵀ`, output `y = p` and feedback `u_k = −Σ_i l_{ki} y_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiAgentSpec {
    pub beta1: f64,
    pub beta2: f64,
    /// Row-major `N × N`.
    pub laplacian: Vec<f64>,
    pub sigma: f64,
    /// Per-mode box half-widths.
    pub alpha: Vec<f64>,
}

impl MultiAgentSpec {
    pub fn reference(beta1: f64, beta2: f64, sigma: f64, alpha: Vec<f64>) -> Result<Self> {
        let spec = Self {
            beta1,
            beta2,
            laplacian: REFERENCE_LAPLACIAN.iter().flatten().copied().collect(),
            sigma,
            alpha,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn agents(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.alpha.len();
        if self.laplacian.len() != n * n {
            return Err(Error::InvalidSpec(format!("laplacian must be {n}×{n}")));
        }
        if !(self.beta1 > 0.0 && self.beta2 > 0.0) {
            return Err(Error::InvalidSpec("spring and damping constants must be positive".into()));
        }
        if self.alpha.iter().any(|a| !(*a > 0.0)) || !(self.sigma >= 0.0) {
            return Err(Error::InvalidSpec("thresholds must be positive and noise nonnegative".into()));
        }
        check_laplacian(&self.laplacian, n)
    }

    pub fn laplacian_matrix(&self) -> DMatrix<f64> {
        let n = self.agents();
        DMatrix::from_row_slice(n, n, &self.laplacian)
    }

    /// Full `2N`-dimensional linear system on all of state space.
    pub fn full_drift(&self) -> Drift {
        let n = 2 * self.agents();
        Drift::Linear { n, h: assemble_h(self) }
    }

    /// One safety problem per mode, ordered as [`laplacian_modes`].
    pub fn mode_systems(&self) -> Result<Vec<SystemSpec>> {
        let (lambda, _) = laplacian_modes(&self.laplacian_matrix())?;
        lambda
            .iter()
            .zip(&self.alpha)
            .map(|(&l, &a)| SystemSpec::mode_safety(self.beta1, l, self.beta2, self.sigma, a))
            .collect()
    }
}

fn check_laplacian(l: &[f64], n: usize) -> Result<()> {
    let scale = l.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in 0..i {
            if (l[i * n + j] - l[j * n + i]).abs() > 1e-12 * scale {
                return Err(Error::InvalidSpec(format!("laplacian not symmetric at ({i}, {j})")));
            }
        }
        let row: f64 = l[i * n..(i + 1) * n].iter().sum();
        if row.abs() > 1e-12 * scale {
            return Err(Error::InvalidSpec(format!("laplacian row {i} sums to {row}")));
        }
    }
    Ok(())
}

/// Eigenvalues (ascending) and orthonormal eigenvectors (columns) of a
/// symmetric matrix; each eigenvector's first nonzero entry is positive.
pub fn laplacian_modes(l: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = l.nrows();
    if l.ncols() != n {
        return Err(Error::InvalidSpec("matrix is not square".into()));
    }
    let scale = l.amax().max(1.0);
    if (l - l.transpose()).amax() > 1e-12 * scale {
        return Err(Error::InvalidSpec("matrix is not symmetric".into()));
    }
    let eig = SymmetricEigen::new(l.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(k).into_owned();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v.neg_mut();
            }
        }
        vectors.set_column(col, &v);
    }
    Ok((values, vectors))
}

/// `H = I_N ⊗ A − L ⊗ BC`, row-major `2N × 2N`.
pub fn assemble_h(spec: &MultiAgentSpec) -> Vec<f64> {
    let n = spec.agents();
    let m = 2 * n;
    let mut h = vec![0.0; m * m];
    for k in 0..n {
        h[(2 * k) * m + 2 * k + 1] = 1.0;
        h[(2 * k + 1) * m + 2 * k] = -spec.beta1;
        h[(2 * k + 1) * m + 2 * k + 1] = -spec.beta2;
        for i in 0..n {
            // BC = [[0, 0], [1, 0]]
            h[(2 * k + 1) * m + 2 * i] -= spec.laplacian[k * n + i];
        }
    }
    h
}

/// Modal coordinates `(t_kᵀ ⊗ I₂) x` for every mode `k`.
pub fn project_modes(vectors: &DMatrix<f64>, x: &[f64]) -> Vec<[f64; 2]> {
    let n = vectors.nrows();
    (0..n)
        .map(|k| {
            let mut z = [0.0; 2];
            for i in 0..n {
                let w = vectors[(i, k)];
                z[0] += w * x[2 * i];
                z[1] += w * x[2 * i + 1];
            }
            z
        })
        .collect()
}

/// Full-state safe region: every mode's coordinates stay inside its box.
#[derive(Clone, Debug)]
pub struct ModalBox {
    vectors: DMatrix<f64>,
    alpha: Vec<f64>,
}

impl ModalBox {
    pub fn new(spec: &MultiAgentSpec) -> Result<Self> {
        spec.validate()?;
        let (_, vectors) = laplacian_modes(&spec.laplacian_matrix())?;
        Ok(Self { vectors, alpha: spec.alpha.clone() })
    }

    fn check(&self, x: &[f64], inside: impl Fn(f64, f64) -> bool) -> bool {
        project_modes(&self.vectors, x)
            .iter()
            .zip(&self.alpha)
            .all(|(z, &a)| inside(z[0], a) && inside(z[1], a))
    }
}

impl SafeRegion for ModalBox {
    fn contains_open(&self, x: &[f64]) -> bool {
        self.check(x, |z, a| z.abs() < a)
    }

    fn contains_closed(&self, x: &[f64]) -> bool {
        self.check(x, |z, a| z.abs() <= a)
    }
}

/// Per-mode probability surface over `(p, v, t)`.
pub trait ModeSurface {
    /// `None` outside the surface's domain.
    fn probability(&self, z: &[f64], t: f64) -> Option<f64>;
}

impl ModeSurface for GridSolution {
    fn probability(&self, z: &[f64], t: f64) -> Option<f64> {
        self.value_at(z, t)
    }
}

impl ModeSurface for ControlTensor {
    fn probability(&self, z: &[f64], t: f64) -> Option<f64> {
        self.value_at(z, t).ok().map(|v| v.clamp(0.0, 1.0))
    }
}

/// Network safety probability as the product of per-mode probabilities at
/// the projected coordinates. A coordinate outside a mode's domain counts as
/// unsafe.
pub fn product_safety<S: ModeSurface>(modes: &[S], vectors: &DMatrix<f64>, x: &[f64], t: f64) -> f64 {
    project_modes(vectors, x)
        .iter()
        .zip(modes)
        .map(|(z, m)| m.probability(z, t).unwrap_or(0.0))
        .product()
}
