//! Clamped B-spline bases on the normalized interval `[0, 1]`.
//!
//! Knot vectors are always clamped: the first and last `d + 1` knots sit on
//! the interval ends and the interior knots are equispaced. Physical
//! coordinates are mapped onto `[0, 1]` with [`rescale`]; derivatives in
//! physical units pick up one Jacobian factor per derivative order.
//!
//! Throughout, `degree` is the polynomial degree `d` of the Cox–de Boor
//! recursion, so degree 0 is the piecewise-constant basis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed real interval `[lo, hi]` with `hi > lo`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(Error::InvalidSpec(format!("empty or unbounded interval [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    /// Point at fraction `u` of the way from `lo` to `hi`.
    pub fn lerp(&self, u: f64) -> f64 {
        self.lo + u * (self.hi - self.lo)
    }
}

/// Clamped, non-decreasing knot vector on `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KnotVector {
    knots: Vec<f64>,
    degree: usize,
    count: usize,
}

impl KnotVector {
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of basis functions (control points) `ℓ`.
    pub fn count(&self) -> usize {
        self.count
    }

    /// Width of one interior knot span in normalized units.
    pub fn span_width(&self) -> f64 {
        1.0 / (self.count - self.degree) as f64
    }

    /// Index `s` of the knot span holding `x`, i.e. `knots[s] <= x < knots[s+1]`.
    /// `x = 1` is assigned to the last nonempty span.
    pub fn find_span(&self, x: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::Domain { value: x, lo: 0.0, hi: 1.0 });
        }
        let last = self.count - 1;
        if x >= self.knots[last + 1] {
            return Ok(last);
        }
        // Binary search over the valid span range [degree, last].
        let (mut lo, mut hi) = (self.degree, last + 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(lo)
    }

    /// Nonzero basis values of degree `q <= degree` on span `span`:
    /// entries correspond to functions `span - q ..= span`.
    fn nonzero_basis(&self, span: usize, q: usize, x: f64) -> Vec<f64> {
        let u = &self.knots;
        let mut n = vec![0.0; q + 1];
        let mut left = vec![0.0; q + 1];
        let mut right = vec![0.0; q + 1];
        n[0] = 1.0;
        for j in 1..=q {
            left[j] = x - u[span + 1 - j];
            right[j] = u[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        n
    }

    /// `p`-th derivatives of the `degree + 1` functions that are nonzero on
    /// `span`, obtained by raising the degree `d - p` basis `p` times through
    /// the knot-difference recursion. Denominators that vanish at repeated
    /// knots contribute zero.
    pub(crate) fn local_derivative(&self, span: usize, p: usize, x: f64) -> Vec<f64> {
        let d = self.degree;
        let u = &self.knots;
        let mut vals = self.nonzero_basis(span, d - p, x);
        for q in (d - p)..d {
            // vals[j] holds D^k B_{span-q+j, q}; build D^{k+1} B_{i, q+1}
            // for i = span-q-1 ..= span.
            let first = span - q;
            let mut next = vec![0.0; q + 2];
            let scale = (q + 1) as f64;
            for (slot, out) in next.iter_mut().enumerate() {
                let i = first + slot - 1; // function index, may be first-1
                let lower = if slot >= 1 { vals[slot - 1] } else { 0.0 };
                let upper = if slot <= q { vals[slot] } else { 0.0 };
                let d0 = u[i + q + 1] - u[i];
                let d1 = u[i + q + 2] - u[i + 1];
                let a = if d0 == 0.0 { 0.0 } else { lower / d0 };
                let b = if d1 == 0.0 { 0.0 } else { upper / d1 };
                *out = scale * (a - b);
            }
            vals = next;
        }
        vals
    }

    /// Value and derivatives up to order `max_order` of the nonzero
    /// functions at `x`. Returns `(first_index, rows)` where `rows[k][j]` is
    /// the `k`-th derivative of function `first_index + j`.
    pub fn local_derivatives(&self, x: f64, max_order: usize) -> Result<(usize, Vec<Vec<f64>>)> {
        let span = self.find_span(x)?;
        let d = self.degree;
        let rows = (0..=max_order)
            .map(|p| {
                if p > d {
                    vec![0.0; d + 1]
                } else {
                    self.local_derivative(span, p, x)
                }
            })
            .collect();
        Ok((span - d, rows))
    }
}

/// Clamped knot vector with `count` basis functions of degree `degree`.
///
/// `domain` is only validated here; knots always live on `[0, 1]`.
pub fn make_knots(count: usize, degree: usize, domain: Interval) -> Result<KnotVector> {
    Interval::new(domain.lo, domain.hi)?;
    if count <= degree {
        return Err(Error::InvalidSpec(format!(
            "{count} control points are too few for degree {degree}"
        )));
    }
    let interior = count - degree - 1;
    let mut knots = Vec::with_capacity(count + degree + 1);
    knots.extend(std::iter::repeat_n(0.0, degree + 1));
    knots.extend((1..=interior).map(|j| j as f64 / (interior + 1) as f64));
    knots.extend(std::iter::repeat_n(1.0, degree + 1));
    Ok(KnotVector { knots, degree, count })
}

/// All `ℓ` basis values at normalized `x ∈ [0, 1]`.
pub fn eval_all(kv: &KnotVector, x: f64) -> Result<Vec<f64>> {
    let span = kv.find_span(x)?;
    let local = kv.nonzero_basis(span, kv.degree, x);
    let mut out = vec![0.0; kv.count];
    out[span - kv.degree..=span].copy_from_slice(&local);
    Ok(out)
}

/// `p`-th derivative of all `ℓ` basis functions at normalized `x`.
pub fn eval_derivative(kv: &KnotVector, p: usize, x: f64) -> Result<Vec<f64>> {
    if p > kv.degree {
        return Err(Error::InvalidOrder { order: p, degree: kv.degree });
    }
    let span = kv.find_span(x)?;
    let local = kv.local_derivative(span, p, x);
    let mut out = vec![0.0; kv.count];
    out[span - kv.degree..=span].copy_from_slice(&local);
    Ok(out)
}

/// Map a physical coordinate to `[0, 1]`; also returns `du/dx = 1/(hi - lo)`.
pub fn rescale(x_phys: f64, domain: Interval) -> Result<(f64, f64)> {
    if !domain.contains(x_phys) {
        return Err(Error::Domain { value: x_phys, lo: domain.lo, hi: domain.hi });
    }
    let jac = 1.0 / domain.width();
    let u = ((x_phys - domain.lo) * jac).clamp(0.0, 1.0);
    Ok((u, jac))
}

/// One tensor-product axis: knots plus the physical interval they map to.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisAxis {
    pub knots: KnotVector,
    pub domain: Interval,
}

/// Tensor-product basis over states followed by time (time is the last axis).
#[derive(Clone, Debug, PartialEq)]
pub struct BasisSpec {
    axes: Vec<BasisAxis>,
}

impl BasisSpec {
    pub fn new(axes: Vec<BasisAxis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidSpec("basis needs at least one axis".into()));
        }
        for a in &axes {
            Interval::new(a.domain.lo, a.domain.hi)?;
        }
        Ok(Self { axes })
    }

    /// Clamped uniform basis from per-axis `(count, degree, domain)`.
    pub fn uniform(axes: &[(usize, usize, Interval)]) -> Result<Self> {
        let axes = axes
            .iter()
            .map(|&(count, degree, domain)| {
                Ok(BasisAxis { knots: make_knots(count, degree, domain)?, domain })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(axes)
    }

    pub fn axes(&self) -> &[BasisAxis] {
        &self.axes
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.knots.count()).collect()
    }

    pub fn domains(&self) -> Vec<Interval> {
        self.axes.iter().map(|a| a.domain).collect()
    }

    /// Same knots over different physical domains.
    pub fn with_domains(&self, domains: &[Interval]) -> Result<Self> {
        if domains.len() != self.axes.len() {
            return Err(Error::Config(format!(
                "expected {} domains, got {}",
                self.axes.len(),
                domains.len()
            )));
        }
        let axes = self
            .axes
            .iter()
            .zip(domains)
            .map(|(a, &domain)| BasisAxis { knots: a.knots.clone(), domain })
            .collect();
        Self::new(axes)
    }

    pub fn total_len(&self) -> usize {
        self.counts().iter().product()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit() -> Interval {
        Interval::new(0.0, 1.0).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn knots_bernstein_case() {
        let kv = make_knots(3, 2, unit()).unwrap();
        assert_eq!(kv.knots(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn knots_one_interior() {
        let kv = make_knots(4, 2, unit()).unwrap();
        assert_eq!(kv.knots(), &[0.0, 0.0, 0.0, 0.5, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn knots_too_few_points() {
        assert!(matches!(make_knots(2, 2, unit()), Err(Error::InvalidSpec(_))));
        assert!(make_knots(4, 2, Interval { lo: 1.0, hi: 1.0 }).is_err());
    }

    #[test]
    fn piecewise_constant_indicator() {
        let kv = make_knots(5, 0, unit()).unwrap();
        // knots 0, .25, .5, .75, 1 with one function per span
        let b = eval_all(&kv, 0.3).unwrap();
        assert_eq!(b, vec![0.0, 1.0, 0.0, 0.0, 0.0]);
        let b = eval_all(&kv, 0.5).unwrap();
        assert_eq!(b, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn bernstein_quadratic_values() {
        let kv = make_knots(3, 2, unit()).unwrap();
        let b = eval_all(&kv, 0.5).unwrap();
        assert!(close(&b, &[0.25, 0.5, 0.25], 1e-15));
        let x: f64 = 0.3;
        let expect = [(1.0 - x).powi(2), 2.0 * x * (1.0 - x), x * x];
        assert!(close(&eval_all(&kv, x).unwrap(), &expect, 1e-15));
    }

    #[test]
    fn bernstein_quadratic_derivative() {
        let kv = make_knots(3, 2, unit()).unwrap();
        let db = eval_derivative(&kv, 1, 0.5).unwrap();
        assert!(close(&db, &[-1.0, 0.0, 1.0], 1e-14));
        let d2 = eval_derivative(&kv, 2, 0.2).unwrap();
        assert!(close(&d2, &[2.0, -4.0, 2.0], 1e-13));
    }

    #[test]
    fn derivative_order_and_domain_errors() {
        let kv = make_knots(6, 3, unit()).unwrap();
        assert!(matches!(eval_derivative(&kv, 4, 0.5), Err(Error::InvalidOrder { .. })));
        assert!(matches!(eval_all(&kv, 1.0001), Err(Error::Domain { .. })));
        assert!(matches!(eval_derivative(&kv, 1, -0.1), Err(Error::Domain { .. })));
    }

    #[test]
    fn endpoint_interpolation() {
        let kv = make_knots(7, 3, unit()).unwrap();
        let b0 = eval_all(&kv, 0.0).unwrap();
        let b1 = eval_all(&kv, 1.0).unwrap();
        assert_eq!(b0[0], 1.0);
        assert!(b0[1..].iter().all(|&v| v == 0.0));
        assert_eq!(b1[6], 1.0);
        assert!(b1[..6].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn partition_of_unity_dense_sweep() {
        for &(count, degree) in &[(4, 1), (8, 2), (12, 3), (9, 4)] {
            let kv = make_knots(count, degree, unit()).unwrap();
            for k in 0..1000 {
                let x = k as f64 / 999.0;
                let b = eval_all(&kv, x).unwrap();
                let s: f64 = b.iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "sum {s} at {x}");
                assert!(b.iter().filter(|&&v| v != 0.0).count() <= degree + 1);
                assert!(b.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn rescale_maps_endpoints() {
        let dom = Interval::new(-10.0, 4.0).unwrap();
        let (u, j) = rescale(4.0, dom).unwrap();
        assert_eq!(u, 1.0);
        assert!((j - 1.0 / 14.0).abs() < 1e-16);
        let (u, j) = rescale(-10.0, dom).unwrap();
        assert_eq!(u, 0.0);
        assert!((j - 1.0 / 14.0).abs() < 1e-16);
        assert!(matches!(rescale(4.5, dom), Err(Error::Domain { .. })));
    }

    #[test]
    fn physical_derivative_chain_rule() {
        // d^p/dx^p of Σ c_i B_i((x-lo)/(hi-lo)) equals the normalized
        // derivative times jac^p; compared with finite differences in x.
        let dom = Interval::new(-3.0, 5.0).unwrap();
        let kv = make_knots(9, 3, unit()).unwrap();
        let coef: Vec<f64> = (0..9).map(|i| ((i * 7 + 3) % 5) as f64 - 2.0).collect();
        let f = |x: f64| -> f64 {
            let (u, _) = rescale(x, dom).unwrap();
            eval_all(&kv, u).unwrap().iter().zip(&coef).map(|(b, c)| b * c).sum()
        };
        let x = 0.37;
        let (u, jac) = rescale(x, dom).unwrap();
        for p in 1..=2 {
            let d: f64 = eval_derivative(&kv, p, u)
                .unwrap()
                .iter()
                .zip(&coef)
                .map(|(b, c)| b * c)
                .sum::<f64>()
                * jac.powi(p as i32);
            let h = 1e-4;
            let fd = if p == 1 {
                (f(x + h) - f(x - h)) / (2.0 * h)
            } else {
                (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
            };
            assert!((d - fd).abs() <= 1e-6 * d.abs().max(1.0), "p={p}: {d} vs {fd}");
        }
    }

    proptest! {
        #[test]
        fn derivative_matches_central_difference(
            degree in 2usize..=4,
            extra in 0usize..8,
            x in 0.02f64..0.98,
            p in 1usize..=2,
        ) {
            let kv = make_knots(degree + 1 + extra, degree, unit()).unwrap();
            // keep the stencil inside one polynomial piece
            let h = if p == 1 { 1e-6 } else { 1e-3 };
            let span_lo = kv.find_span(x - 2.0 * h).unwrap();
            let span_hi = kv.find_span(x + 2.0 * h).unwrap();
            prop_assume!(span_lo == span_hi);
            let analytic = eval_derivative(&kv, p, x).unwrap();
            let at = |k: f64| eval_all(&kv, x + k * h).unwrap();
            let (m2, m1, z, p1, p2) = (at(-2.0), at(-1.0), at(0.0), at(1.0), at(2.0));
            for i in 0..kv.count() {
                // second derivative: five-point stencil, exact through degree 5
                let fd = if p == 1 {
                    (p1[i] - m1[i]) / (2.0 * h)
                } else {
                    (-p2[i] + 16.0 * p1[i] - 30.0 * z[i] + 16.0 * m1[i] - m2[i]) / (12.0 * h * h)
                };
                let scale = analytic[i].abs().max(1.0);
                prop_assert!((analytic[i] - fd).abs() / scale < 1e-6,
                    "i={} analytic={} fd={}", i, analytic[i], fd);
            }
        }

        #[test]
        fn first_derivatives_sum_to_zero(degree in 1usize..=4, extra in 0usize..6, x in 0.0f64..=1.0) {
            let kv = make_knots(degree + 1 + extra, degree, unit()).unwrap();
            let s: f64 = eval_derivative(&kv, 1, x).unwrap().iter().sum();
            prop_assert!(s.abs() < 1e-9);
        }
    }
}
