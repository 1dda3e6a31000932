//! Scenarios and the catching-up time stepping `x_{i+1} = proj_C(x_i + h f(x_i,u_i))`.

use std::sync::Arc;

use nalgebra::DVector;

use crate::calculus::{DriftOracle, SignedDrift, SubgradientSet};
use crate::error::{check_dim, Error, Result};
use crate::polyhedra::{CqMode, Polyhedron, DEFAULT_TOL};

/// Compact control constraint set `U`.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlSet {
    Box {
        lower: DVector<f64>,
        upper: DVector<f64>,
    },
    /// `{ from + tau (to - from) : tau in [0,1] }`
    Segment {
        from: DVector<f64>,
        to: DVector<f64>,
    },
    Finite(Vec<DVector<f64>>),
}

/// Span and cone generators of the normal cone `N(u; U)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NormalConeGenerators {
    pub span: Vec<DVector<f64>>,
    pub cone: Vec<DVector<f64>>,
}

impl ControlSet {
    pub fn validate(&self) -> Result<()> {
        match self {
            ControlSet::Box { lower, upper } => {
                check_dim(lower.len(), upper.len(), "box bounds")?;
                if lower.is_empty() {
                    return Err(Error::Invalid("box control set has dimension 0".into()));
                }
                for k in 0..lower.len() {
                    if !(lower[k].is_finite() && upper[k].is_finite()) || lower[k] > upper[k] {
                        return Err(Error::Invalid(format!("box coordinate {k} has lower > upper or non-finite bounds")));
                    }
                }
            }
            ControlSet::Segment { from, to } => {
                check_dim(from.len(), to.len(), "segment endpoints")?;
                if from.is_empty() {
                    return Err(Error::Invalid("segment control set has dimension 0".into()));
                }
                if from.iter().chain(to.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::Invalid("segment endpoints must be finite".into()));
                }
                if from == to {
                    return Err(Error::Invalid("segment endpoints coincide".into()));
                }
            }
            ControlSet::Finite(points) => {
                let Some(first) = points.first() else {
                    return Err(Error::Invalid("finite control set is empty".into()));
                };
                if first.is_empty() {
                    return Err(Error::Invalid("finite control set has dimension 0".into()));
                }
                for p in points {
                    check_dim(first.len(), p.len(), "finite control point")?;
                    if p.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Invalid("finite control points must be finite".into()));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Box { lower, .. } => lower.len(),
            ControlSet::Segment { from, .. } => from.len(),
            ControlSet::Finite(p) => p[0].len(),
        }
    }

    pub fn is_convex(&self) -> bool {
        match self {
            ControlSet::Finite(p) => p.iter().all(|q| q == &p[0]),
            _ => true,
        }
    }

    /// Segment point at parameter `tau`.
    pub fn segment_point(from: &DVector<f64>, to: &DVector<f64>, tau: f64) -> DVector<f64> {
        if tau == 1.0 {
            return to.clone();
        }
        from + (to - from) * tau
    }

    fn scale(&self, u: &DVector<f64>) -> f64 {
        let m = match self {
            ControlSet::Box { lower, upper } => lower.amax().max(upper.amax()),
            ControlSet::Segment { from, to } => from.amax().max(to.amax()),
            ControlSet::Finite(p) => p.iter().map(|q| q.amax()).fold(0.0, f64::max),
        };
        1.0 + m.max(u.amax())
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> Result<bool> {
        check_dim(self.dim(), u.len(), "control")?;
        let t = tol * self.scale(u);
        Ok(match self {
            ControlSet::Box { lower, upper } => {
                (0..u.len()).all(|k| u[k] >= lower[k] - t && u[k] <= upper[k] + t)
            }
            ControlSet::Segment { from, to } => {
                let tau = Self::segment_parameter(from, to, u);
                (-tol..=1.0 + tol).contains(&tau)
                    && (Self::segment_point(from, to, tau) - u).norm() <= t
            }
            ControlSet::Finite(points) => points.iter().any(|p| (p - u).norm() <= t),
        })
    }

    pub fn segment_parameter(from: &DVector<f64>, to: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let d = to - from;
        (u - from).dot(&d) / d.norm_squared()
    }

    /// Nearest point of `U`.
    pub fn project(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), u.len(), "control")?;
        Ok(match self {
            ControlSet::Box { lower, upper } => {
                DVector::from_iterator(u.len(), (0..u.len()).map(|k| u[k].clamp(lower[k], upper[k])))
            }
            ControlSet::Segment { from, to } => {
                let tau = Self::segment_parameter(from, to, u).clamp(0.0, 1.0);
                Self::segment_point(from, to, tau)
            }
            ControlSet::Finite(points) => {
                let mut best = &points[0];
                let mut bd = (best - u).norm();
                for p in &points[1..] {
                    let d = (p - u).norm();
                    if d < bd {
                        best = p;
                        bd = d;
                    }
                }
                best.clone()
            }
        })
    }

    /// Generators of `N(u; U)` (for a finite set, all of `R^d`).
    pub fn normal_cone(&self, u: &DVector<f64>, tol: f64) -> Result<NormalConeGenerators> {
        if !self.contains(u, tol.max(DEFAULT_TOL))? {
            return Err(Error::Precondition("control is not in U".into()));
        }
        let d = self.dim();
        let unit = |k: usize, s: f64| {
            let mut e = DVector::zeros(d);
            e[k] = s;
            e
        };
        let mut out = NormalConeGenerators::default();
        let t = tol.max(DEFAULT_TOL) * self.scale(u);
        match self {
            ControlSet::Box { lower, upper } => {
                for k in 0..d {
                    if upper[k] - lower[k] <= t {
                        out.span.push(unit(k, 1.0));
                    } else if u[k] >= upper[k] - t {
                        out.cone.push(unit(k, 1.0));
                    } else if u[k] <= lower[k] + t {
                        out.cone.push(unit(k, -1.0));
                    }
                }
            }
            ControlSet::Segment { from, to } => {
                let dir = to - from;
                let dn = &dir / dir.norm();
                // Orthonormal complement of the segment direction.
                let mut basis: Vec<DVector<f64>> = Vec::new();
                for k in 0..d {
                    let mut e = unit(k, 1.0);
                    e.axpy(-dn[k], &dn, 1.0);
                    for b in &basis {
                        let c = b.dot(&e);
                        e.axpy(-c, b, 1.0);
                    }
                    let nrm = e.norm();
                    if nrm > 1e-8 {
                        basis.push(e / nrm);
                    }
                }
                out.span = basis;
                let tau = Self::segment_parameter(from, to, u);
                let ttol = tol.max(DEFAULT_TOL);
                if tau >= 1.0 - ttol {
                    out.cone.push(dn.clone());
                }
                if tau <= ttol {
                    out.cone.push(-dn);
                }
            }
            ControlSet::Finite(_) => {
                out.span = (0..d).map(|k| unit(k, 1.0)).collect();
            }
        }
        Ok(out)
    }

    /// A maximizer of `<psi, u>` over `U` (lowest-index / first choice on ties).
    pub fn support_maximizer(&self, psi: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), psi.len(), "control covector")?;
        Ok(match self {
            ControlSet::Box { lower, upper } => DVector::from_iterator(
                psi.len(),
                (0..psi.len()).map(|k| if psi[k] > 0.0 { upper[k] } else { lower[k] }),
            ),
            ControlSet::Segment { from, to } => {
                if psi.dot(to) > psi.dot(from) {
                    to.clone()
                } else {
                    from.clone()
                }
            }
            ControlSet::Finite(points) => {
                let mut best = &points[0];
                for p in &points[1..] {
                    if psi.dot(p) > psi.dot(best) {
                        best = p;
                    }
                }
                best.clone()
            }
        })
    }
}

/// Terminal cost `phi`.
#[derive(Debug, Clone, PartialEq)]
pub enum TerminalCost {
    /// `1/2 ||x - target||^2`
    HalfNormSq { target: DVector<f64> },
    /// `<weights, x>`
    Linear { weights: DVector<f64> },
    /// `sum_k |x_k - target_k|`
    L1 { target: DVector<f64> },
}

impl TerminalCost {
    pub fn dim(&self) -> usize {
        match self {
            TerminalCost::HalfNormSq { target } | TerminalCost::L1 { target } => target.len(),
            TerminalCost::Linear { weights } => weights.len(),
        }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match self {
            TerminalCost::HalfNormSq { target } => 0.5 * (x - target).norm_squared(),
            TerminalCost::Linear { weights } => weights.dot(x),
            TerminalCost::L1 { target } => (x - target).iter().map(|v| v.abs()).sum(),
        }
    }

    pub fn is_smooth(&self) -> bool {
        !matches!(self, TerminalCost::L1 { .. })
    }

    /// `d phi(x)` as a box in `R^n`.
    pub fn subdifferential(&self, x: &DVector<f64>) -> SubgradientSet {
        match self {
            TerminalCost::HalfNormSq { target } => SubgradientSet::singleton(x - target),
            TerminalCost::Linear { weights } => SubgradientSet::singleton(weights.clone()),
            TerminalCost::L1 { target } => {
                let n = x.len();
                let mut lo = DVector::zeros(n);
                let mut hi = DVector::zeros(n);
                for k in 0..n {
                    let r = x[k] - target[k];
                    if r > 0.0 {
                        lo[k] = 1.0;
                        hi[k] = 1.0;
                    } else if r < 0.0 {
                        lo[k] = -1.0;
                        hi[k] = -1.0;
                    } else {
                        lo[k] = -1.0;
                        hi[k] = 1.0;
                    }
                }
                SubgradientSet::Box { lower: lo, upper: hi }
            }
        }
    }
}

/// Sign convention of the drift in the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DriftSign {
    /// `-x' in N(x;C) + g(x,u)`
    #[default]
    Theory,
    /// `x' = g(x,u) - sum eta_j x*_j`, i.e. `-x' in N(x;C) - g(x,u)`
    Example,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub polyhedron: Polyhedron,
    pub drift: Arc<dyn DriftOracle>,
    pub drift_sign: DriftSign,
    pub control_set: ControlSet,
    pub x0: DVector<f64>,
    pub horizon: f64,
    pub cost: TerminalCost,
}

impl Scenario {
    /// Validates dimensions, `T > 0` and feasibility of `x0`.
    pub fn new(
        polyhedron: Polyhedron,
        drift: Arc<dyn DriftOracle>,
        drift_sign: DriftSign,
        control_set: ControlSet,
        x0: DVector<f64>,
        horizon: f64,
        cost: TerminalCost,
    ) -> Result<Self> {
        let n = polyhedron.dim();
        check_dim(n, drift.state_dim(), "drift state dimension")?;
        check_dim(n, x0.len(), "x0")?;
        check_dim(n, cost.dim(), "cost dimension")?;
        control_set.validate()?;
        check_dim(drift.control_dim(), control_set.dim(), "control dimension")?;
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Invalid("horizon must be positive".into()));
        }
        if let Some((index, excess)) = polyhedron.first_violation(&x0, DEFAULT_TOL)? {
            return Err(Error::Infeasible { index, excess });
        }
        Ok(Scenario {
            polyhedron,
            drift,
            drift_sign,
            control_set,
            x0,
            horizon,
            cost,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.polyhedron.dim()
    }

    pub fn control_dim(&self) -> usize {
        self.control_set.dim()
    }

    fn sign(&self) -> f64 {
        match self.drift_sign {
            DriftSign::Theory => 1.0,
            DriftSign::Example => -1.0,
        }
    }

    /// The drift in theory form: `-x' in N(x;C) + theory_drift(x,u)`.
    pub fn theory_drift(&self) -> SignedDrift {
        SignedDrift {
            inner: self.drift.clone(),
            sign: self.sign(),
        }
    }

    /// Free velocity `f(x,u) = -theory_drift(x,u)`.
    pub fn velocity(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.drift.eval(x, u) * (-self.sign())
    }
}

/// Uniform mesh `t_i = i T / N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mesh {
    pub steps: usize,
    pub horizon: f64,
}

impl Mesh {
    pub fn new(steps: usize, horizon: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("mesh needs at least one step".into()));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Invalid("horizon must be positive".into()));
        }
        Ok(Mesh { steps, horizon })
    }

    /// `N = 2^m`.
    pub fn power_of_two(m: u32, horizon: f64) -> Result<Self> {
        if m > 40 {
            return Err(Error::Invalid(format!("mesh power {m} is too large")));
        }
        Mesh::new(1usize << m, horizon)
    }

    /// `Some(m)` when `N = 2^m`.
    pub fn power(&self) -> Option<u32> {
        self.steps.is_power_of_two().then(|| self.steps.trailing_zeros())
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.horizon / self.steps as f64
        }
    }
}

/// States on the mesh with controls and normal-cone multipliers per step.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteTrajectory {
    pub mesh: Mesh,
    /// `x_0 .. x_N`
    pub states: Vec<DVector<f64>>,
    /// `u_0 .. u_{N-1}`
    pub controls: Vec<DVector<f64>>,
    /// `eta_0 .. eta_{N-1}`; empty when the multipliers are unknown.
    pub eta: Vec<DVector<f64>>,
    /// Per-step residual of the discrete inclusion; empty when unknown.
    pub residuals: Vec<f64>,
    /// `max_i || sum_j eta_ij x*_j ||` (0 when the multipliers are unknown).
    pub max_normal_norm: f64,
}

impl DiscreteTrajectory {
    pub fn has_multipliers(&self) -> bool {
        self.eta.len() == self.mesh.steps
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least one state")
    }

    /// Checks lengths and dimensions against a scenario.
    pub fn check_shape(&self, s: &Scenario) -> Result<()> {
        let n = self.mesh.steps;
        check_dim(n + 1, self.states.len(), "state count")?;
        check_dim(n, self.controls.len(), "control count")?;
        for x in &self.states {
            check_dim(s.state_dim(), x.len(), "state")?;
        }
        for u in &self.controls {
            check_dim(s.control_dim(), u.len(), "control")?;
        }
        if !self.eta.is_empty() {
            check_dim(n, self.eta.len(), "multiplier count")?;
            for e in &self.eta {
                check_dim(s.polyhedron.count(), e.len(), "multiplier")?;
            }
        }
        Ok(())
    }
}

/// One catching-up step. Returns `(x_next, eta, residual)` where `eta` are the
/// projection multipliers divided by `h`.
pub fn catching_up_step(
    s: &Scenario,
    x: &DVector<f64>,
    u: &DVector<f64>,
    h: f64,
) -> Result<(DVector<f64>, DVector<f64>, f64)> {
    check_dim(s.state_dim(), x.len(), "state")?;
    check_dim(s.control_dim(), u.len(), "control")?;
    if !(h > 0.0) {
        return Err(Error::Invalid("step must be positive".into()));
    }
    s.polyhedron.require_feasible(x, 1e-8)?;
    let f = s.velocity(x, u);
    let z = x + &f * h;
    let proj = s.polyhedron.project(&z)?;
    let eta = proj.multipliers / h;
    let normal = s.polyhedron.combine(&eta);
    let res = (&proj.point - x + (normal - f) * h).norm();
    Ok((proj.point, eta, res))
}

/// Folds [`catching_up_step`] over the mesh.
pub fn simulate(s: &Scenario, controls: &[DVector<f64>], mesh: Mesh) -> Result<DiscreteTrajectory> {
    check_dim(mesh.steps, controls.len(), "control count")?;
    let h = mesh.step();
    let mut states = Vec::with_capacity(mesh.steps + 1);
    let mut etas = Vec::with_capacity(mesh.steps);
    let mut residuals = Vec::with_capacity(mesh.steps);
    let mut x = s.x0.clone();
    let mut max_normal = 0.0f64;
    for (i, u) in controls.iter().enumerate() {
        if !s.control_set.contains(u, 1e-9)? {
            return Err(Error::Invalid(format!("control at step {i} is not in U")));
        }
        let (next, eta, res) = catching_up_step(s, &x, u, h)?;
        max_normal = max_normal.max(s.polyhedron.combine(&eta).norm());
        states.push(std::mem::replace(&mut x, next));
        etas.push(eta);
        residuals.push(res);
    }
    states.push(x);
    Ok(DiscreteTrajectory {
        mesh,
        states,
        controls: controls.to_vec(),
        eta: etas,
        residuals,
        max_normal_norm: max_normal,
    })
}

/// Multipliers recovered from a trajectory by nonnegative least squares.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaRecovery {
    pub eta: Vec<DVector<f64>>,
    /// Absolute NNLS residual per step.
    pub residuals: Vec<f64>,
    /// Scaled residual per step: residual / (1 + ||velocity|| + ||drift||).
    pub scaled: Vec<f64>,
    /// Steps at which PLICQ fails at `x_{i+1}` (multipliers may be non-unique).
    pub plicq_failures: Vec<usize>,
}

/// Solves `-(x_{i+1}-x_i)/h - g~(x_i,u_i) = sum_j eta_j x*_j`, `eta >= 0`,
/// supported on the constraints active at `x_{i+1}`, without judging the residual.
pub fn recover_eta_unchecked(s: &Scenario, traj: &DiscreteTrajectory, tol: f64) -> Result<EtaRecovery> {
    traj.check_shape(s)?;
    let h = traj.mesh.step();
    let g = s.theory_drift();
    let mut out = EtaRecovery {
        eta: Vec::with_capacity(traj.mesh.steps),
        residuals: Vec::with_capacity(traj.mesh.steps),
        scaled: Vec::with_capacity(traj.mesh.steps),
        plicq_failures: Vec::new(),
    };
    for i in 0..traj.mesh.steps {
        let xi = &traj.states[i];
        let xn = &traj.states[i + 1];
        let vel = (xn - xi) / h;
        let drift = g.eval(xi, &traj.controls[i]);
        let v = -&vel - &drift;
        let active = s.polyhedron.active_indices(xn, tol)?;
        if active.len() > 1 && !s.polyhedron.check_cq(xn, CqMode::Plicq, tol)?.holds {
            out.plicq_failures.push(i);
        }
        let (eta, res) = s.polyhedron.nnls_on(&active, &v)?;
        out.scaled.push(res / (1.0 + vel.norm() + drift.norm()));
        out.eta.push(eta);
        out.residuals.push(res);
    }
    Ok(out)
}

/// Like [`recover_eta_unchecked`] but fails when some scaled residual exceeds
/// `residual_tol` (the trajectory is not a discrete sweeping solution).
pub fn recover_eta(s: &Scenario, traj: &DiscreteTrajectory, tol: f64, residual_tol: f64) -> Result<EtaRecovery> {
    for (i, x) in traj.states.iter().enumerate() {
        if let Some((index, excess)) = s.polyhedron.first_violation(x, tol)? {
            return Err(Error::Precondition(format!(
                "state {i} leaves C: constraint {index} exceeded by {excess:e}"
            )));
        }
    }
    let r = recover_eta_unchecked(s, traj, tol)?;
    if let Some((i, v)) = r.scaled.iter().enumerate().find(|(_, &v)| v > residual_tol) {
        return Err(Error::Precondition(format!(
            "step {i} is not a sweeping step: scaled residual {v:e}"
        )));
    }
    Ok(r)
}

/// Deterministic low-discrepancy points in `[0,1)^dim`.
pub fn halton(index: usize, dim: usize) -> Vec<f64> {
    const PRIMES: [usize; 32] = [
        2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
        97, 101, 103, 107, 109, 113, 127, 131,
    ];
    (0..dim)
        .map(|k| {
            let base = PRIMES[k % PRIMES.len()];
            // Dimensions beyond the table reuse primes with a shifted index.
            let mut i = index + 1 + (k / PRIMES.len()) * 7919;
            let mut f = 1.0;
            let mut r = 0.0;
            while i > 0 {
                f /= base as f64;
                r += f * (i % base) as f64;
                i /= base;
            }
            r
        })
        .collect()
}

fn sample_control(u: &ControlSet, t: &[f64], index: usize) -> DVector<f64> {
    match u {
        ControlSet::Box { lower, upper } => DVector::from_iterator(
            lower.len(),
            (0..lower.len()).map(|k| lower[k] + t[k] * (upper[k] - lower[k])),
        ),
        ControlSet::Segment { from, to } => ControlSet::segment_point(from, to, t[0]),
        ControlSet::Finite(p) => p[index % p.len()].clone(),
    }
}

/// A constraint-qualification failure found while sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct CqWitness {
    pub state: DVector<f64>,
    pub active: Vec<usize>,
    pub coefficients: DVector<f64>,
}

/// Report of [`validate_assumptions`].
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub samples: usize,
    /// Finite-difference Lipschitz estimate of `phi` over the region.
    pub cost_lipschitz: f64,
    pub control_set_compact: bool,
    /// Finite-difference Lipschitz estimate of `g` in `(x,u)`.
    pub drift_lipschitz: f64,
    /// `max ||g(x,u)|| / (1 + ||x||)` over the samples.
    pub beta_hat: f64,
    pub beta_inner: f64,
    pub beta_outer: f64,
    /// Set when growth on the outer shell exceeds twice the inner-shell growth.
    pub superlinear: bool,
    /// Sample attaining the largest outer-shell growth ratio.
    pub growth_witness: Option<(DVector<f64>, DVector<f64>)>,
    pub plicq_failures: Vec<CqWitness>,
}

impl AssumptionReport {
    pub fn growth_ok(&self) -> bool {
        !self.superlinear
    }
}

/// Samples states in `region` (default `x0 ± 10(1+||x0||_inf)`) and controls in
/// `U` to estimate Lipschitz and growth constants and to test PLICQ at projected
/// sample points.
pub fn validate_assumptions(
    s: &Scenario,
    sample_count: usize,
    region: Option<(DVector<f64>, DVector<f64>)>,
) -> Result<AssumptionReport> {
    let n = s.state_dim();
    let d = s.control_dim();
    let (lo, hi) = match region {
        Some((lo, hi)) => {
            check_dim(n, lo.len(), "region lower corner")?;
            check_dim(n, hi.len(), "region upper corner")?;
            (lo, hi)
        }
        None => {
            let r = 10.0 * (1.0 + s.x0.amax());
            (s.x0.add_scalar(-r), s.x0.add_scalar(r))
        }
    };
    let center = (&lo + &hi) * 0.5;
    let half = (&hi - &lo) * 0.5;
    let count = sample_count.max(1);
    let mut rep = AssumptionReport {
        samples: count,
        cost_lipschitz: 0.0,
        control_set_compact: s.control_set.validate().is_ok(),
        drift_lipschitz: 0.0,
        beta_hat: 0.0,
        beta_inner: 0.0,
        beta_outer: 0.0,
        superlinear: false,
        growth_witness: None,
        plicq_failures: Vec::new(),
    };
    let fd = 1e-6 * (1.0 + half.amax());
    for i in 0..count {
        let t = halton(i, n + d.max(1) + n + d.max(1));
        let cube = |off: usize, shrink: f64| {
            DVector::from_iterator(n, (0..n).map(|k| center[k] + shrink * half[k] * (2.0 * t[off + k] - 1.0)))
        };
        let u = sample_control(&s.control_set, &t[n..n + d.max(1)], i);
        for (shrink, outer) in [(0.1, false), (1.0, true)] {
            let x = cube(0, shrink);
            let gx = s.drift.eval(&x, &u);
            let ratio = gx.norm() / (1.0 + x.norm());
            rep.beta_hat = rep.beta_hat.max(ratio);
            if outer {
                if ratio > rep.beta_outer {
                    rep.beta_outer = ratio;
                    rep.growth_witness = Some((x.clone(), u.clone()));
                }
            } else {
                rep.beta_inner = rep.beta_inner.max(ratio);
            }
            // Directional finite differences for the Lipschitz estimates.
            let dir_x = cube(n + d.max(1), 1.0) - &center;
            let dnorm = dir_x.norm();
            if dnorm > 0.0 {
                let step = &dir_x * (fd / dnorm);
                let gp = s.drift.eval(&(&x + &step), &u);
                rep.drift_lipschitz = rep.drift_lipschitz.max((gp - &gx).norm() / fd);
                let cp = s.cost.value(&(&x + &step));
                rep.cost_lipschitz = rep.cost_lipschitz.max((cp - s.cost.value(&x)).abs() / fd);
            }
            let u2 = sample_control(&s.control_set, &t[2 * n + d.max(1)..], i + 1);
            let du = (&u2 - &u).norm();
            if du > 0.0 {
                let up = &u + (&u2 - &u) * (fd / du);
                let gu = s.drift.eval(&x, &up);
                rep.drift_lipschitz = rep.drift_lipschitz.max((gu - &gx).norm() / fd);
            }
            if outer && s.polyhedron.count() > 0 {
                let y = s.polyhedron.project(&x)?.point;
                let cq = s.polyhedron.check_cq(&y, CqMode::Plicq, 1e-8)?;
                if !cq.holds && rep.plicq_failures.len() < 16 {
                    rep.plicq_failures.push(CqWitness {
                        state: y,
                        active: cq.active.indices.clone(),
                        coefficients: cq.witness.unwrap_or_else(|| DVector::zeros(0)),
                    });
                }
            }
        }
    }
    rep.superlinear = rep.beta_outer > 2.0 * rep.beta_inner;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{RobotDrift, SmoothDrift};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn constant_drift(n: usize, f: DVector<f64>) -> Arc<dyn DriftOracle> {
        Arc::new(SmoothDrift::new(n, 1, move |_x, _u| f.clone(), move |_x, _u| {
            (DMatrix::zeros(n, n), DMatrix::zeros(n, 1))
        }))
    }

    fn halfspace_scenario(f: DVector<f64>, x0: DVector<f64>) -> Scenario {
        let a = v(&[1.0, 2.0]);
        Scenario::new(
            Polyhedron::new(2, vec![a], vec![1.0]).unwrap(),
            constant_drift(2, f),
            DriftSign::Example,
            ControlSet::Box { lower: v(&[0.0]), upper: v(&[1.0]) },
            x0,
            1.0,
            TerminalCost::HalfNormSq { target: v(&[0.0, 0.0]) },
        )
        .unwrap()
    }

    #[test]
    fn free_motion_step() {
        let s = halfspace_scenario(v(&[0.5, -0.25]), v(&[-3.0, -3.0]));
        let (x, eta, res) = catching_up_step(&s, &s.x0, &v(&[0.0]), 0.1).unwrap();
        assert!((x - v(&[-2.95, -3.025])).norm() < 1e-14);
        assert_eq!(eta[0], 0.0);
        assert!(res < 1e-14);
    }

    #[test]
    fn boundary_step_with_normal_push() {
        // x on the boundary, f = a / ||a||^2 points straight out.
        let a = v(&[1.0, 2.0]);
        let f = &a / a.norm_squared();
        let x0 = v(&[1.0, 0.0]);
        let s = halfspace_scenario(f.clone(), x0.clone());
        let h = 0.01;
        let (x, eta, _) = catching_up_step(&s, &x0, &v(&[0.0]), h).unwrap();
        assert!((x - x0).norm() < 1e-14);
        assert_abs_diff_eq!(eta[0], a.dot(&f) / a.norm_squared(), epsilon = 1e-12);
    }

    #[test]
    fn zero_drift_keeps_state() {
        let s = halfspace_scenario(v(&[0.0, 0.0]), v(&[-1.0, -1.0]));
        let mesh = Mesh::power_of_two(4, 1.0).unwrap();
        let t = simulate(&s, &vec![v(&[0.5]); 16], mesh).unwrap();
        assert!(t.states.iter().all(|x| *x == s.x0));
        assert!(t.eta.iter().all(|e| e[0] == 0.0));
        let r = recover_eta(&s, &t, DEFAULT_TOL, 1e-9).unwrap();
        assert!(r.eta.iter().all(|e| e[0] == 0.0));
    }

    #[test]
    fn infeasible_trajectory_is_rejected() {
        let s = halfspace_scenario(v(&[0.0, 0.0]), v(&[-1.0, -1.0]));
        let mesh = Mesh::new(1, 1.0).unwrap();
        let t = DiscreteTrajectory {
            mesh,
            states: vec![v(&[-1.0, -1.0]), v(&[5.0, 5.0])],
            controls: vec![v(&[0.0])],
            eta: Vec::new(),
            residuals: Vec::new(),
            max_normal_norm: 0.0,
        };
        assert!(matches!(recover_eta(&s, &t, DEFAULT_TOL, 1e-9), Err(Error::Precondition(_))));
    }

    #[test]
    fn control_set_normal_cones() {
        let seg = ControlSet::Segment { from: v(&[-4.0, -2.0]), to: v(&[3.0, 1.5]) };
        let end = seg.normal_cone(&v(&[3.0, 1.5]), 1e-9).unwrap();
        assert_eq!(end.span.len(), 1);
        assert_eq!(end.cone.len(), 1);
        assert!(end.cone[0][0] > 0.0);
        let mid = seg.normal_cone(&v(&[0.0, 0.0]), 1e-9).unwrap();
        assert!(mid.cone.is_empty());
        assert!(mid.span[0].dot(&v(&[2.0, 1.0])).abs() < 1e-12);
        assert!(seg.normal_cone(&v(&[1.0, 0.0]), 1e-9).is_err());

        let bx = ControlSet::Box { lower: v(&[0.0, 0.0]), upper: v(&[1.0, 1.0]) };
        let c = bx.normal_cone(&v(&[1.0, 0.5]), 1e-9).unwrap();
        assert_eq!(c.cone, vec![v(&[1.0, 0.0])]);
        let fin = ControlSet::Finite(vec![v(&[0.0]), v(&[2.0])]);
        assert_eq!(fin.normal_cone(&v(&[2.0]), 1e-9).unwrap().span.len(), 1);
    }

    #[test]
    fn control_set_validation() {
        assert!(ControlSet::Segment { from: v(&[1.0]), to: v(&[1.0]) }.validate().is_err());
        assert!(ControlSet::Box { lower: v(&[1.0]), upper: v(&[0.0]) }.validate().is_err());
        assert!(ControlSet::Finite(vec![]).validate().is_err());
    }

    #[test]
    fn mesh_nodes() {
        let m = Mesh::power_of_two(3, 6.0).unwrap();
        assert_eq!(m.steps, 8);
        assert_eq!(m.power(), Some(3));
        assert_eq!(m.node(0), 0.0);
        assert_eq!(m.node(8), 6.0);
        assert_eq!(Mesh::new(6, 1.0).unwrap().power(), None);
    }

    #[test]
    fn robot_growth_is_bounded_by_largest_drift_norm() {
        let drift: Arc<dyn DriftOracle> = Arc::new(RobotDrift::new(vec![3.0, 1.0], vec![225.0, 225.0]).unwrap());
        let s = Scenario::new(
            Polyhedron::new(4, vec![v(&[-1.0, -1.0, 1.0, 1.0])], vec![24.0]).unwrap(),
            drift,
            DriftSign::Example,
            ControlSet::Segment { from: v(&[-4.0, -2.0]), to: v(&[3.0, 1.5]) },
            v(&[-30.0, -30.0, -20.0, -20.0]),
            6.0,
            TerminalCost::HalfNormSq { target: DVector::zeros(4) },
        )
        .unwrap();
        let rep = validate_assumptions(&s, 400, None).unwrap();
        // ||g|| <= sqrt(12^2 + 2^2) for u on the segment, attained at (-4,-2).
        assert!(rep.beta_hat <= 148f64.sqrt() + 1e-12);
        assert!(!rep.superlinear);
        assert!(rep.drift_lipschitz <= 3.0 + 1e-6);
        assert!(rep.plicq_failures.is_empty());
    }

    #[test]
    fn superlinear_drift_is_flagged() {
        let drift: Arc<dyn DriftOracle> = Arc::new(SmoothDrift::new(
            1,
            1,
            |x, _u| DVector::from_element(1, x[0] * x[0]),
            |x, _u| (DMatrix::from_element(1, 1, 2.0 * x[0]), DMatrix::zeros(1, 1)),
        ));
        let s = Scenario::new(
            Polyhedron::unconstrained(1),
            drift,
            DriftSign::Theory,
            ControlSet::Box { lower: v(&[0.0]), upper: v(&[1.0]) },
            v(&[0.0]),
            1.0,
            TerminalCost::Linear { weights: v(&[1.0]) },
        )
        .unwrap();
        let rep = validate_assumptions(&s, 200, None).unwrap();
        assert!(rep.superlinear);
        let (x, _) = rep.growth_witness.unwrap();
        assert!(x[0].abs() > 5.0);
    }

    #[test]
    fn opposing_generators_fail_plicq() {
        let s = Scenario::new(
            Polyhedron::new(2, vec![v(&[1.0, 0.0]), v(&[-1.0, 0.0])], vec![0.0, 0.0]).unwrap(),
            constant_drift(2, v(&[0.0, 0.0])),
            DriftSign::Theory,
            ControlSet::Box { lower: v(&[0.0]), upper: v(&[1.0]) },
            v(&[0.0, 0.0]),
            1.0,
            TerminalCost::HalfNormSq { target: v(&[0.0, 0.0]) },
        )
        .unwrap();
        let rep = validate_assumptions(&s, 20, None).unwrap();
        assert!(!rep.plicq_failures.is_empty());
        let w = &rep.plicq_failures[0];
        assert_eq!(w.active, vec![0, 1]);
        assert!(w.coefficients.iter().all(|&c| c > 0.5));
    }
}
