//! Generalized differentiation of the velocity mapping `F(x,u) = N(x;C) + g(x,u)`.
//!
//! Drifts expose `eval` and the scalarized subdifferential `d<w, g>(x,u)` as a
//! [`SubgradientSet`] in `R^{n+d}`. The coderivative upper estimate
//! `D*F(x,u,omega)(w) ⊂ d<w,g>(x,u) + (sum_{I0 ∪ I>} gamma_j x*_j, 0)` is decided
//! by a small constrained least-squares program.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::GeneratedSet;
use crate::polyhedra::{IndexConvention, Polyhedron};

/// A compact convex set of subgradients in `R^{n+d}`.
#[derive(Debug, Clone, PartialEq)]
pub enum SubgradientSet {
    /// Convex hull of finitely many points.
    Vertices(Vec<DVector<f64>>),
    /// Product of intervals `[lower_k, upper_k]`.
    Box {
        lower: DVector<f64>,
        upper: DVector<f64>,
    },
}

impl SubgradientSet {
    pub fn singleton(v: DVector<f64>) -> Self {
        SubgradientSet::Box {
            lower: v.clone(),
            upper: v,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SubgradientSet::Vertices(v) => v.first().map_or(0, |p| p.len()),
            SubgradientSet::Box { lower, .. } => lower.len(),
        }
    }

    /// `alpha * set` for `alpha >= 0`.
    pub fn scaled(&self, alpha: f64) -> Self {
        match self {
            SubgradientSet::Vertices(v) => {
                SubgradientSet::Vertices(v.iter().map(|p| p * alpha).collect())
            }
            SubgradientSet::Box { lower, upper } => SubgradientSet::Box {
                lower: lower * alpha,
                upper: upper * alpha,
            },
        }
    }

    /// Extreme points (boxes are expanded over their nondegenerate coordinates).
    pub fn vertices(&self) -> Vec<DVector<f64>> {
        match self {
            SubgradientSet::Vertices(v) => v.clone(),
            SubgradientSet::Box { lower, upper } => {
                let free: Vec<usize> = (0..lower.len()).filter(|&k| upper[k] > lower[k]).collect();
                let mut out = Vec::with_capacity(1 << free.len());
                for mask in 0..(1usize << free.len()) {
                    let mut p = lower.clone();
                    for (b, &k) in free.iter().enumerate() {
                        if mask & (1 << b) != 0 {
                            p[k] = upper[k];
                        }
                    }
                    out.push(p);
                }
                out
            }
        }
    }

    /// Adds the set as a summand of `target`.
    pub fn add_to(&self, target: &mut GeneratedSet) {
        match self {
            SubgradientSet::Vertices(v) => {
                if v.len() == 1 {
                    target.shift(&v[0]);
                } else {
                    target.set_hull(v.clone());
                }
            }
            SubgradientSet::Box { lower, upper } => {
                let dim = lower.len();
                for k in 0..dim {
                    if upper[k] > lower[k] {
                        let mut e = DVector::zeros(dim);
                        e[k] = 1.0;
                        target.add_bounded(e, lower[k], upper[k]);
                    } else {
                        let mut e = DVector::zeros(dim);
                        e[k] = lower[k];
                        target.shift(&e);
                    }
                }
            }
        }
    }

    /// Euclidean distance from `p` to the set.
    pub fn distance(&self, p: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim(), p.len(), "subgradient point")?;
        match self {
            SubgradientSet::Box { lower, upper } => Ok(p
                .iter()
                .zip(lower.iter().zip(upper.iter()))
                .map(|(&v, (&lo, &hi))| {
                    let d = if v < lo { lo - v } else if v > hi { v - hi } else { 0.0 };
                    d * d
                })
                .sum::<f64>()
                .sqrt()),
            SubgradientSet::Vertices(_) => {
                let mut set = GeneratedSet::new(p.len());
                self.add_to(&mut set);
                Ok(set.nearest(p)?.distance)
            }
        }
    }

    /// Largest absolute coordinate over the set.
    pub fn magnitude(&self) -> f64 {
        match self {
            SubgradientSet::Vertices(v) => v.iter().map(|p| p.amax()).fold(0.0, f64::max),
            SubgradientSet::Box { lower, upper } => lower.amax().max(upper.amax()),
        }
    }
}

/// The perturbation `g(x,u)` together with its scalarized subdifferential.
pub trait DriftOracle: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// `d<w, g>(x,u)` as a subset of `R^{n+d}` (state part first).
    fn scalar_subdiff(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> SubgradientSet;
    fn lipschitz_bound(&self) -> Option<f64> {
        None
    }
    fn growth_beta(&self) -> Option<f64> {
        None
    }
}

/// Two-dimensional robots pushed along fixed headings with speed `s_i |u_i|`:
/// `g(x,u) = (s_1|u_1| cos th_1, s_1|u_1| sin th_1, s_2|u_2| cos th_2, ...)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotDrift {
    pub speeds: Vec<f64>,
    pub angles_deg: Vec<f64>,
}

impl RobotDrift {
    pub fn new(speeds: Vec<f64>, angles_deg: Vec<f64>) -> Result<Self> {
        check_dim(speeds.len(), angles_deg.len(), "robot angles")?;
        if speeds.is_empty() {
            return Err(Error::Invalid("robot drift needs at least one robot".into()));
        }
        Ok(RobotDrift { speeds, angles_deg })
    }

    fn heading(&self, i: usize) -> (f64, f64) {
        let th = self.angles_deg[i].to_radians();
        (th.cos(), th.sin())
    }
}

impl DriftOracle for RobotDrift {
    fn state_dim(&self) -> usize {
        2 * self.speeds.len()
    }
    fn control_dim(&self) -> usize {
        self.speeds.len()
    }
    fn eval(&self, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.state_dim());
        for i in 0..self.speeds.len() {
            let (c, s) = self.heading(i);
            let r = self.speeds[i] * u[i].abs();
            g[2 * i] = r * c;
            g[2 * i + 1] = r * s;
        }
        g
    }
    fn scalar_subdiff(&self, _x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> SubgradientSet {
        let n = self.state_dim();
        let d = self.control_dim();
        let mut lower = DVector::zeros(n + d);
        let mut upper = DVector::zeros(n + d);
        for i in 0..d {
            let (c, s) = self.heading(i);
            let kappa = w[2 * i] * c + w[2 * i + 1] * s;
            let coef = self.speeds[i] * kappa;
            if u[i] != 0.0 {
                let v = coef * u[i].signum();
                lower[n + i] = v;
                upper[n + i] = v;
            } else {
                lower[n + i] = -coef.abs();
                upper[n + i] = coef.abs();
            }
        }
        SubgradientSet::Box { lower, upper }
    }
    fn lipschitz_bound(&self) -> Option<f64> {
        Some(self.speeds.iter().fold(0.0f64, |m, s| m.max(s.abs())))
    }
}

/// One absolute-value term `v |<alpha, x> + <beta, u> + delta|`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kink {
    pub direction: DVector<f64>,
    pub state_weights: DVector<f64>,
    pub control_weights: DVector<f64>,
    pub shift: f64,
}

/// Continuous piecewise-affine drift `A x + B u + c + sum_k v_k |l_k(x,u)|`.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsAffineDrift {
    pub state_matrix: DMatrix<f64>,
    pub control_matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub kinks: Vec<Kink>,
}

impl AbsAffineDrift {
    pub fn new(
        state_matrix: DMatrix<f64>,
        control_matrix: DMatrix<f64>,
        offset: DVector<f64>,
        kinks: Vec<Kink>,
    ) -> Result<Self> {
        let n = state_matrix.nrows();
        check_dim(n, state_matrix.ncols(), "state matrix columns")?;
        check_dim(n, control_matrix.nrows(), "control matrix rows")?;
        check_dim(n, offset.len(), "drift offset")?;
        let d = control_matrix.ncols();
        for k in &kinks {
            check_dim(n, k.direction.len(), "kink direction")?;
            check_dim(n, k.state_weights.len(), "kink state weights")?;
            check_dim(d, k.control_weights.len(), "kink control weights")?;
        }
        Ok(AbsAffineDrift {
            state_matrix,
            control_matrix,
            offset,
            kinks,
        })
    }

    fn kink_value(k: &Kink, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        k.state_weights.dot(x) + k.control_weights.dot(u) + k.shift
    }

    fn kink_row(k: &Kink) -> DVector<f64> {
        let n = k.state_weights.len();
        let d = k.control_weights.len();
        let mut r = DVector::zeros(n + d);
        r.rows_mut(0, n).copy_from(&k.state_weights);
        r.rows_mut(n, d).copy_from(&k.control_weights);
        r
    }
}

impl DriftOracle for AbsAffineDrift {
    fn state_dim(&self) -> usize {
        self.state_matrix.nrows()
    }
    fn control_dim(&self) -> usize {
        self.control_matrix.ncols()
    }
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut g = &self.state_matrix * x + &self.control_matrix * u + &self.offset;
        for k in &self.kinks {
            g.axpy(Self::kink_value(k, x, u).abs(), &k.direction, 1.0);
        }
        g
    }
    fn scalar_subdiff(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> SubgradientSet {
        let n = self.state_dim();
        let d = self.control_dim();
        let mut base = DVector::zeros(n + d);
        base.rows_mut(0, n).copy_from(&self.state_matrix.tr_mul(w));
        base.rows_mut(n, d).copy_from(&self.control_matrix.tr_mul(w));
        let mut segments: Vec<DVector<f64>> = Vec::new();
        for k in &self.kinks {
            let weight = k.direction.dot(w);
            if weight == 0.0 {
                continue;
            }
            let row = Self::kink_row(k);
            let val = Self::kink_value(k, x, u);
            let scale = 1.0 + row.norm() * (x.norm() + u.norm()) + k.shift.abs();
            if val.abs() > 1e-12 * scale {
                base.axpy(weight * val.signum(), &row, 1.0);
            } else {
                segments.push(row * weight.abs());
            }
        }
        if segments.is_empty() {
            return SubgradientSet::singleton(base);
        }
        // Axis-aligned kinks on distinct coordinates give a box.
        let mut lower = base.clone();
        let mut upper = base.clone();
        let mut used = vec![false; n + d];
        let mut boxed = true;
        for seg in &segments {
            let nz: Vec<usize> = (0..n + d).filter(|&i| seg[i] != 0.0).collect();
            if nz.len() != 1 || used[nz[0]] {
                boxed = false;
                break;
            }
            used[nz[0]] = true;
            let r = seg[nz[0]].abs();
            lower[nz[0]] -= r;
            upper[nz[0]] += r;
        }
        if boxed {
            return SubgradientSet::Box { lower, upper };
        }
        let mut verts = Vec::with_capacity(1 << segments.len());
        for mask in 0..(1usize << segments.len()) {
            let mut p = base.clone();
            for (b, seg) in segments.iter().enumerate() {
                let sgn = if mask & (1 << b) != 0 { 1.0 } else { -1.0 };
                p.axpy(sgn, seg, 1.0);
            }
            verts.push(p);
        }
        SubgradientSet::Vertices(verts)
    }
    fn lipschitz_bound(&self) -> Option<f64> {
        let mut l = self.state_matrix.norm() + self.control_matrix.norm();
        for k in &self.kinks {
            l += k.direction.norm() * Self::kink_row(k).norm();
        }
        Some(l)
    }
}

type Map = dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;
type Jac = dyn Fn(&DVector<f64>, &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) + Send + Sync;

/// A continuously differentiable drift given by closures for `g` and its
/// partial Jacobians `(d_x g, d_u g)`.
#[derive(Clone)]
pub struct SmoothDrift {
    n: usize,
    d: usize,
    map: Arc<Map>,
    jacobian: Arc<Jac>,
}

impl SmoothDrift {
    pub fn new(
        n: usize,
        d: usize,
        map: impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        jacobian: impl Fn(&DVector<f64>, &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) + Send + Sync + 'static,
    ) -> Self {
        SmoothDrift {
            n,
            d,
            map: Arc::new(map),
            jacobian: Arc::new(jacobian),
        }
    }
}

impl fmt::Debug for SmoothDrift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SmoothDrift {{ n: {}, d: {} }}", self.n, self.d)
    }
}

impl DriftOracle for SmoothDrift {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn control_dim(&self) -> usize {
        self.d
    }
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.map)(x, u)
    }
    fn scalar_subdiff(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> SubgradientSet {
        let (jx, ju) = (self.jacobian)(x, u);
        let mut v = DVector::zeros(self.n + self.d);
        v.rows_mut(0, self.n).copy_from(&jx.tr_mul(w));
        v.rows_mut(self.n, self.d).copy_from(&ju.tr_mul(w));
        SubgradientSet::singleton(v)
    }
}

/// `sign * g`. Used to pass between the two sign conventions of the dynamics.
#[derive(Debug, Clone)]
pub struct SignedDrift {
    pub inner: Arc<dyn DriftOracle>,
    pub sign: f64,
}

impl DriftOracle for SignedDrift {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn control_dim(&self) -> usize {
        self.inner.control_dim()
    }
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.inner.eval(x, u) * self.sign
    }
    fn scalar_subdiff(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> SubgradientSet {
        // <w, sign g> = <sign w, g>
        self.inner.scalar_subdiff(x, u, &(w * self.sign))
    }
    fn lipschitz_bound(&self) -> Option<f64> {
        self.inner.lipschitz_bound()
    }
    fn growth_beta(&self) -> Option<f64> {
        self.inner.growth_beta()
    }
}

fn check_oracle_dims(g: &dyn DriftOracle, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
    check_dim(g.state_dim(), x.len(), "state")?;
    check_dim(g.control_dim(), u.len(), "control")
}

/// `d<w, g>(x,u)` with dimension checks; `w = 0` gives `{0}`.
pub fn scalar_subdifferential(
    g: &dyn DriftOracle,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<SubgradientSet> {
    check_oracle_dims(g, x, u)?;
    check_dim(g.state_dim(), w.len(), "adjoint direction")?;
    if w.iter().all(|&v| v == 0.0) {
        return Ok(SubgradientSet::singleton(DVector::zeros(g.state_dim() + g.control_dim())));
    }
    let s = g.scalar_subdiff(x, u, w);
    check_dim(g.state_dim() + g.control_dim(), s.dim(), "oracle subgradient")?;
    Ok(s)
}

/// Outcome of [`coderivative_membership`].
#[derive(Debug, Clone)]
pub struct MembershipVerdict {
    pub member: bool,
    pub distance: f64,
    /// The subgradient `zeta` of the best decomposition.
    pub subgradient: DVector<f64>,
    /// Coefficients `gamma_j` (length `s`, zero off `I0 ∪ I>`).
    pub gamma: DVector<f64>,
}

/// The set `d<w,g>(x,u) + { (sum gamma_j x*_j, 0) : gamma_j free on I0, >= 0 on I> }`.
pub fn estimate_set(
    poly: &Polyhedron,
    sub: &SubgradientSet,
    zero: &[usize],
    positive: &[usize],
) -> GeneratedSet {
    let n = poly.dim();
    let total = sub.dim();
    let mut set = GeneratedSet::new(total);
    sub.add_to(&mut set);
    let lift = |j: usize| {
        let mut c = DVector::zeros(total);
        c.rows_mut(0, n).copy_from(poly.generator(j));
        c
    };
    for &j in zero {
        set.add_free(lift(j));
    }
    for &j in positive {
        set.add_nonneg(lift(j));
    }
    set
}

/// Decides whether `z` lies in the coderivative upper estimate at `(x,u,omega)`
/// in direction `w`.
#[allow(clippy::too_many_arguments)]
pub fn coderivative_membership(
    poly: &Polyhedron,
    g: &dyn DriftOracle,
    x: &DVector<f64>,
    u: &DVector<f64>,
    omega: &DVector<f64>,
    w: &DVector<f64>,
    z: &DVector<f64>,
    convention: IndexConvention,
    tol: f64,
) -> Result<MembershipVerdict> {
    check_oracle_dims(g, x, u)?;
    check_dim(poly.dim(), omega.len(), "velocity")?;
    check_dim(poly.dim() + g.control_dim(), z.len(), "candidate")?;
    let normal = omega - g.eval(x, u);
    if poly.normal_cone_decompose(x, &normal, tol)?.is_none() {
        return Err(Error::Precondition(
            "omega - g(x,u) is not in the normal cone at x".into(),
        ));
    }
    let (zero, positive) = poly.second_order_index_sets(x, w, convention, tol)?;
    let sub = scalar_subdifferential(g, x, u, w)?;
    let set = estimate_set(poly, &sub, &zero, &positive);
    let near = set.nearest(z)?;
    let mut gamma = DVector::zeros(poly.count());
    for (k, &j) in zero.iter().enumerate() {
        gamma[j] = near.free[k];
    }
    for (k, &j) in positive.iter().enumerate() {
        gamma[j] = near.nonneg[k];
    }
    let mut zeta = near.point.clone();
    zeta.rows_mut(0, poly.dim()).axpy(-1.0, &poly.combine(&gamma), 1.0);
    Ok(MembershipVerdict {
        member: near.distance <= tol.max(1e-9) * (1.0 + z.norm()),
        distance: near.distance,
        subgradient: zeta,
        gamma,
    })
}

/// Outcome of [`coderivative_domain_licq`].
#[derive(Debug, Clone, PartialEq)]
pub struct DomainVerdict {
    pub in_domain: bool,
    pub lambda: DVector<f64>,
}

/// Under LICQ at `x`: recovers `lambda` from `omega - g(x,u) = sum lambda_j x*_j`
/// and reports whether `lambda_j > 0` forces `<x*_j, w> = 0`.
pub fn coderivative_domain_licq(
    poly: &Polyhedron,
    g: &dyn DriftOracle,
    x: &DVector<f64>,
    u: &DVector<f64>,
    omega: &DVector<f64>,
    w: &DVector<f64>,
    tol: f64,
) -> Result<DomainVerdict> {
    check_oracle_dims(g, x, u)?;
    check_dim(poly.dim(), w.len(), "adjoint direction")?;
    let cq = poly.check_cq(x, crate::polyhedra::CqMode::Licq, tol)?;
    if !cq.holds {
        return Err(Error::ConstraintQualification("LICQ fails at x".into()));
    }
    let normal = omega - g.eval(x, u);
    let lambda = poly
        .normal_cone_decompose(x, &normal, tol)?
        .ok_or_else(|| Error::Precondition("omega - g(x,u) is not in the normal cone at x".into()))?;
    let lmax = lambda.amax();
    let in_domain = (0..poly.count()).all(|j| {
        let scale = 1.0 + poly.generator(j).norm() * w.norm();
        lambda[j] <= tol * (1.0 + lmax) || poly.generator(j).dot(w).abs() <= tol * scale
    });
    Ok(DomainVerdict { in_domain, lambda })
}
