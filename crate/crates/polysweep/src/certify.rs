//! Dual certificates and residual checks of the necessary optimality conditions.
//!
//! A certificate carries two adjoint sequences. `p` is the smooth adjoint,
//! `q` the one that jumps across the atoms of the measure:
//! `q_i = p_i - sum_{k >= i} sum_j gamma_kj x*_j` with `q_N = p_N`.
//! Atoms `gamma_k` live in `R^s` (one coefficient per constraint) and are
//! masses, not densities.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::calculus::{scalar_subdifferential, SubgradientSet};
use crate::discrete_ocp::DiscreteProblem;
use crate::dynamics::{recover_eta_unchecked, ControlSet, DiscreteTrajectory, Scenario};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{nnls, GeneratedSet};
use crate::polyhedra::{CqMode, IndexConvention, Polyhedron};

#[derive(Debug, Clone, PartialEq)]
pub struct DualCertificate {
    pub lambda: f64,
    /// `p_0 .. p_N`
    pub p: Vec<DVector<f64>>,
    /// `q_0 .. q_N`
    pub q: Vec<DVector<f64>>,
    /// Atom of cell `i`, one coefficient per constraint.
    pub gamma: Vec<DVector<f64>>,
    pub psi: Vec<DVector<f64>>,
    pub eta_t: DVector<f64>,
    pub theta_y: Vec<DVector<f64>>,
    pub theta_u: Vec<DVector<f64>>,
}

impl DualCertificate {
    pub fn zeros(steps: usize, n: usize, d: usize, s: usize) -> Self {
        DualCertificate {
            lambda: 0.0,
            p: vec![DVector::zeros(n); steps + 1],
            q: vec![DVector::zeros(n); steps + 1],
            gamma: vec![DVector::zeros(s); steps],
            psi: vec![DVector::zeros(d); steps],
            eta_t: DVector::zeros(s),
            theta_y: vec![DVector::zeros(n); steps],
            theta_u: vec![DVector::zeros(d); steps],
        }
    }

    pub fn steps(&self) -> usize {
        self.gamma.len()
    }

    /// Verifies every length against `(N, n, d, s)`.
    pub fn check_shape(&self, steps: usize, n: usize, d: usize, s: usize) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Invalid("lambda must be a finite nonnegative number".into()));
        }
        check_dim(steps + 1, self.p.len(), "certificate p length")?;
        check_dim(steps + 1, self.q.len(), "certificate q length")?;
        check_dim(steps, self.gamma.len(), "certificate gamma length")?;
        check_dim(steps, self.psi.len(), "certificate psi length")?;
        check_dim(steps, self.theta_y.len(), "certificate theta_y length")?;
        check_dim(steps, self.theta_u.len(), "certificate theta_u length")?;
        check_dim(s, self.eta_t.len(), "certificate eta_T")?;
        for v in self.p.iter().chain(&self.q).chain(&self.theta_y) {
            check_dim(n, v.len(), "certificate state covector")?;
        }
        for v in self.psi.iter().chain(&self.theta_u) {
            check_dim(d, v.len(), "certificate control covector")?;
        }
        for v in &self.gamma {
            check_dim(s, v.len(), "certificate atom")?;
        }
        let finite = |v: &DVector<f64>| v.iter().all(|x| x.is_finite());
        let all = self
            .p
            .iter()
            .chain(&self.q)
            .chain(&self.gamma)
            .chain(&self.psi)
            .chain(&self.theta_y)
            .chain(&self.theta_u)
            .chain(std::iter::once(&self.eta_t));
        for v in all {
            if !finite(v) {
                return Err(Error::Invalid("certificate contains non-finite entries".into()));
            }
        }
        Ok(())
    }

    /// `p_0 - q_0`, the total mass of the vector measure in `R^n`.
    pub fn jump_total(&self) -> DVector<f64> {
        &self.p[0] - &self.q[0]
    }

    /// `sum_i sum_j gamma_ij x*_j`.
    pub fn gamma_total(&self, poly: &Polyhedron) -> DVector<f64> {
        let mut acc = DVector::zeros(poly.dim());
        for g in &self.gamma {
            acc += poly.combine(g);
        }
        acc
    }

    /// Unscaled `||q_i + sum_{k >= i} sum_j gamma_kj x*_j - p_i||` for `i = 0..N`.
    pub fn identity_residuals(&self, poly: &Polyhedron) -> Vec<f64> {
        let n = self.steps();
        let mut out = vec![0.0; n + 1];
        let mut tail = DVector::zeros(poly.dim());
        out[n] = (&self.q[n] - &self.p[n]).norm();
        for i in (0..n).rev() {
            tail += poly.combine(&self.gamma[i]);
            out[i] = (&self.q[i] + &tail - &self.p[i]).norm();
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConditionId {
    El,
    Trans,
    CompPrimal,
    CompDual,
    Max,
    Nonatom,
    Nontriv,
    NontrivEnh,
    Codomain,
}

impl ConditionId {
    pub const ALL: [ConditionId; 9] = [
        ConditionId::El,
        ConditionId::Trans,
        ConditionId::CompPrimal,
        ConditionId::CompDual,
        ConditionId::Max,
        ConditionId::Nonatom,
        ConditionId::Nontriv,
        ConditionId::NontrivEnh,
        ConditionId::Codomain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionId::El => "EL",
            ConditionId::Trans => "TRANS",
            ConditionId::CompPrimal => "COMP_PRIMAL",
            ConditionId::CompDual => "COMP_DUAL",
            ConditionId::Max => "MAX",
            ConditionId::Nonatom => "NONATOM",
            ConditionId::Nontriv => "NONTRIV",
            ConditionId::NontrivEnh => "NONTRIV_ENH",
            ConditionId::Codomain => "CODOMAIN",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for ConditionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Satisfied,
    Vacuous,
    Violated,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Satisfied => "satisfied",
            Status::Vacuous => "vacuous",
            Status::Violated => "violated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "satisfied" => Some(Status::Satisfied),
            "vacuous" => Some(Status::Vacuous),
            "violated" => Some(Status::Violated),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEntry {
    pub status: Status,
    /// Largest scaled residual over the instances whose antecedent held.
    pub residual: f64,
    /// Human-readable locations of the worst violations (at most a few).
    pub witnesses: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConditionReport {
    pub conditions: BTreeMap<ConditionId, ConditionEntry>,
    /// Extra checks that do not affect the verdict.
    pub informational: BTreeMap<String, ConditionEntry>,
}

impl ConditionReport {
    pub fn violated(&self) -> Vec<ConditionId> {
        self.conditions
            .iter()
            .filter(|(_, e)| e.status == Status::Violated)
            .map(|(k, _)| *k)
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.violated().is_empty()
    }

    pub fn max_residual(&self) -> f64 {
        self.conditions.values().map(|e| e.residual).fold(0.0, f64::max)
    }
}

const MAX_WITNESSES: usize = 5;

/// Accumulates instances `antecedent => residual <= tol`.
///
/// The entry is vacuous when no antecedent held, violated when some instance
/// with a true antecedent exceeds `tol`, and satisfied otherwise.
#[derive(Debug, Clone)]
pub struct Implications {
    tol: f64,
    any_active: bool,
    worst: f64,
    witnesses: Vec<String>,
}

impl Implications {
    pub fn new(tol: f64) -> Self {
        Implications {
            tol,
            any_active: false,
            worst: 0.0,
            witnesses: Vec::new(),
        }
    }

    pub fn add(&mut self, antecedent: bool, residual: f64, witness: impl FnOnce() -> String) {
        if !antecedent {
            return;
        }
        self.any_active = true;
        let r = if residual.is_nan() { f64::INFINITY } else { residual.max(0.0) };
        if r > self.tol && self.witnesses.len() < MAX_WITNESSES {
            self.witnesses.push(format!("{} (residual {:.3e})", witness(), r));
        }
        self.worst = self.worst.max(r);
    }

    /// An unconditional instance.
    pub fn require(&mut self, residual: f64, witness: impl FnOnce() -> String) {
        self.add(true, residual, witness);
    }

    pub fn finish(self) -> ConditionEntry {
        if !self.any_active {
            return ConditionEntry {
                status: Status::Vacuous,
                residual: 0.0,
                witnesses: Vec::new(),
            };
        }
        ConditionEntry {
            status: if self.worst > self.tol { Status::Violated } else { Status::Satisfied },
            residual: self.worst,
            witnesses: self.witnesses,
        }
    }
}

fn vacuous(note: &str) -> ConditionEntry {
    ConditionEntry {
        status: Status::Vacuous,
        residual: 0.0,
        witnesses: vec![note.to_string()],
    }
}

/// Tolerances and conventions for the checkers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    /// Threshold on scaled residuals.
    pub tol: f64,
    /// Relative tolerance for active sets and strict interiority.
    pub geometry_tol: f64,
    pub convention: IndexConvention,
    /// Also report `<x*_j, q> = c_j` on cells with nonzero multipliers
    /// (informational only).
    pub offset_form: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            tol: 1e-6,
            geometry_tol: 1e-8,
            convention: IndexConvention::Homogeneous,
            offset_form: false,
        }
    }
}

/// `max_{u in U} <psi, u> - <psi, ubar>`.
pub fn maximization_residual(u: &ControlSet, psi: &DVector<f64>, ubar: &DVector<f64>) -> Result<f64> {
    check_dim(u.dim(), ubar.len(), "reference control")?;
    if !u.contains(ubar, 1e-9)? {
        return Err(Error::Precondition("reference control is not in U".into()));
    }
    let best = u.support_maximizer(psi)?;
    Ok((psi.dot(&best) - psi.dot(ubar)).max(0.0))
}

/// Distance from `psi` to `N(u; U)`.
fn normal_cone_distance(u: &ControlSet, at: &DVector<f64>, psi: &DVector<f64>, tol: f64) -> Result<f64> {
    let cone = u.normal_cone(at, tol)?;
    let mut set = GeneratedSet::new(u.dim());
    for v in cone.span {
        set.add_free(v);
    }
    for v in cone.cone {
        set.add_nonneg(v);
    }
    Ok(set.nearest(psi)?.distance)
}

fn concat(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

fn multipliers(s: &Scenario, traj: &DiscreteTrajectory) -> Result<Vec<DVector<f64>>> {
    if traj.has_multipliers() {
        Ok(traj.eta.clone())
    } else {
        Ok(recover_eta_unchecked(s, traj, 1e-9)?.eta)
    }
}

fn check_inputs(s: &Scenario, traj: &DiscreteTrajectory, cert: &DualCertificate) -> Result<()> {
    traj.check_shape(s)?;
    cert.check_shape(
        traj.mesh.steps,
        s.state_dim(),
        s.control_dim(),
        s.polyhedron.count(),
    )
}

/// Shared per-step geometry of a trajectory.
struct Geometry {
    eta: Vec<DVector<f64>>,
    /// Active sets at `x_0 .. x_N`.
    active: Vec<Vec<bool>>,
    interior: Vec<bool>,
    licq: Vec<bool>,
    eta_threshold: f64,
    dual_scale: f64,
}

impl Geometry {
    fn new(s: &Scenario, traj: &DiscreteTrajectory, cert: &DualCertificate, opts: &CheckOptions) -> Result<Self> {
        let poly = &s.polyhedron;
        let eta = multipliers(s, traj)?;
        let mut active = Vec::with_capacity(traj.states.len());
        let mut interior = Vec::with_capacity(traj.states.len());
        let mut licq = Vec::with_capacity(traj.states.len());
        for x in &traj.states {
            // Infeasible states have no active set; treat every constraint as
            // inactive so the implications involving them fire.
            let set = match poly.active_indices(x, opts.geometry_tol) {
                Ok(a) => a,
                Err(Error::Infeasible { .. }) => Default::default(),
                Err(e) => return Err(e),
            };
            let mut mask = vec![false; poly.count()];
            for &j in &set.indices {
                mask[j] = true;
            }
            active.push(mask);
            interior.push(poly.strictly_interior(x, opts.geometry_tol)?);
            licq.push(match poly.check_cq(x, CqMode::Licq, opts.geometry_tol) {
                Ok(v) => v.holds,
                Err(Error::Infeasible { .. }) => false,
                Err(e) => return Err(e),
            });
        }
        let max_eta = eta.iter().map(|e| e.amax()).fold(0.0, f64::max);
        let max_norm = |v: &[DVector<f64>]| v.iter().map(|x| x.norm()).fold(0.0, f64::max);
        Ok(Geometry {
            eta,
            active,
            interior,
            licq,
            eta_threshold: opts.tol * (1.0 + max_eta),
            dual_scale: 1.0 + cert.lambda + max_norm(&cert.p) + max_norm(&cert.q),
        })
    }
}

/// Primal representation, multiplier signs and complementarity.
fn primal_entry(s: &Scenario, traj: &DiscreteTrajectory, cert: &DualCertificate, geo: &Geometry, opts: &CheckOptions) -> ConditionEntry {
    let poly = &s.polyhedron;
    let g = s.theory_drift();
    let h = traj.mesh.step();
    let mut imp = Implications::new(opts.tol);
    for i in 0..traj.mesh.steps {
        let slope = (&traj.states[i + 1] - &traj.states[i]) / h;
        let gv = crate::calculus::DriftOracle::eval(&g, &traj.states[i], &traj.controls[i]);
        let normal = poly.combine(&geo.eta[i]);
        let r = (-&slope - &gv - &normal).norm() / (1.0 + slope.norm() + gv.norm() + normal.norm());
        imp.require(r, || format!("step {i}: primal representation"));
        let scale = 1.0 + geo.eta[i].amax();
        for j in 0..poly.count() {
            let e = geo.eta[i][j];
            imp.require((-e).max(0.0) / scale, || format!("step {i}: eta[{j}] < 0"));
            imp.add(!geo.active[i + 1][j], e.abs() / scale, || {
                format!("step {i}: constraint {j} inactive at x_{} but eta = {e:.6e}", i + 1)
            });
        }
    }
    let n = traj.mesh.steps;
    let scale = 1.0 + cert.eta_t.amax();
    for j in 0..poly.count() {
        let e = cert.eta_t[j];
        imp.require((-e).max(0.0) / scale, || format!("eta_T[{j}] < 0"));
        imp.add(!geo.active[n][j], e.abs() / scale, || format!("eta_T[{j}] on inactive constraint"));
    }
    imp.finish()
}

fn transversality_entry(s: &Scenario, traj: &DiscreteTrajectory, cert: &DualCertificate, geo: &Geometry, opts: &CheckOptions) -> Result<ConditionEntry> {
    let poly = &s.polyhedron;
    let n = traj.mesh.steps;
    let xn = traj.final_state();
    let normal = poly.combine(&cert.eta_t);
    let target = -&cert.p[n] - &normal;
    let sub = s.cost.subdifferential(xn).scaled(cert.lambda);
    let d = sub.distance(&target)?;
    let mut imp = Implications::new(opts.tol);
    imp.require(d / (1.0 + cert.p[n].norm() + normal.norm() + sub.magnitude()), || {
        "terminal adjoint outside lambda * d phi + N(x_N; C)".to_string()
    });
    let scale = 1.0 + cert.eta_t.amax();
    for j in 0..poly.count() {
        let e = cert.eta_t[j];
        imp.require((-e).max(0.0) / scale, || format!("eta_T[{j}] < 0"));
        imp.add(!geo.active[n][j], e.abs() / scale, || format!("eta_T[{j}] on inactive constraint"));
    }
    Ok(imp.finish())
}

fn identity_check(imp: &mut Implications, poly: &Polyhedron, cert: &DualCertificate) {
    for (i, r) in cert.identity_residuals(poly).into_iter().enumerate() {
        let scale = 1.0 + cert.p[i].norm() + cert.q[i].norm();
        imp.require(r / scale, || format!("node {i}: q + tail(gamma) != p"));
    }
}

fn nonatom_entry(traj: &DiscreteTrajectory, cert: &DualCertificate, geo: &Geometry, opts: &CheckOptions) -> ConditionEntry {
    let mut imp = Implications::new(opts.tol);
    for i in 0..traj.mesh.steps {
        imp.add(geo.interior[i] && geo.interior[i + 1], cert.gamma[i].amax() / geo.dual_scale, || {
            format!("cell {i}: atom on a strictly interior cell")
        });
    }
    imp.finish()
}

fn max_entry(s: &Scenario, traj: &DiscreteTrajectory, cert: &DualCertificate, opts: &CheckOptions, global: bool) -> Result<ConditionEntry> {
    let mut imp = Implications::new(opts.tol);
    let u = &s.control_set;
    for i in 0..traj.mesh.steps {
        let psi = &cert.psi[i];
        let ui = &traj.controls[i];
        if global && u.is_convex() {
            let r = maximization_residual(u, psi, ui)?;
            imp.require(r / (1.0 + psi.norm() * ui.norm()), || format!("step {i}: u_i does not maximize <psi, u>"));
        } else if global {
            // Tangential form: the tangent cone to a finite set at any of its
            // points is {0}, so sup_{v in T} <psi, v> = 0 always holds.
            imp.require(0.0, String::new);
        } else {
            let d = normal_cone_distance(u, ui, psi, opts.geometry_tol)?;
            imp.require(d / (1.0 + psi.norm()), || format!("step {i}: psi not in N(u_i; U)"));
        }
    }
    Ok(imp.finish())
}

/// Residuals of the discrete necessary conditions for `Pr`.
pub fn check_discrete_conditions(
    pr: &DiscreteProblem<'_>,
    traj: &DiscreteTrajectory,
    cert: &DualCertificate,
    opts: &CheckOptions,
) -> Result<ConditionReport> {
    let s = pr.scenario;
    check_inputs(s, traj, cert)?;
    let poly = &s.polyhedron;
    let g = s.theory_drift();
    let h = traj.mesh.step();
    let steps = traj.mesh.steps;
    let lambda = cert.lambda;
    let geo = Geometry::new(s, traj, cert, opts)?;
    let mut conditions = BTreeMap::new();

    let mut el = Implications::new(opts.tol);
    let mut dual = Implications::new(opts.tol);
    let mut codomain = Implications::new(opts.tol);
    for i in 0..steps {
        let w = &cert.q[i + 1] - &cert.theta_y[i] * (lambda / h);
        let sub = scalar_subdifferential(&g, &traj.states[i], &traj.controls[i], &w)?;
        let required = concat(
            &((&cert.p[i + 1] - &cert.p[i]) / h),
            &(-&cert.theta_u[i] * (lambda / h) - &cert.psi[i]),
        );
        let d = sub.distance(&required)?;
        el.require(d / (1.0 + required.norm() + sub.magnitude()), || format!("step {i}: adjoint inclusion"));

        let (zero, pos) = poly.second_order_index_sets(&traj.states[i + 1], &w, opts.convention, opts.geometry_tol)?;
        for j in 0..poly.count() {
            let gam = cert.gamma[i][j];
            let r = gam.abs() / geo.dual_scale;
            if !geo.active[i + 1][j] {
                dual.add(true, r, || format!("cell {i}: atom on inactive constraint {j}"));
            } else if pos.contains(&j) {
                dual.add(true, (-gam).max(0.0) / geo.dual_scale, || format!("cell {i}: negative atom on I>[{j}]"));
            } else if !zero.contains(&j) {
                dual.add(true, r, || format!("cell {i}: atom outside I0 u I> for constraint {j}"));
            }
            let xs = poly.generator(j);
            codomain.add(geo.licq[i + 1] && geo.eta[i][j] > geo.eta_threshold, xs.dot(&w).abs() / (1.0 + xs.norm() * w.norm()), || {
                format!("step {i}: <x*_{j}, w> != 0 with positive multiplier")
            });
        }
    }
    identity_check(&mut el, poly, cert);
    conditions.insert(ConditionId::El, el.finish());
    conditions.insert(ConditionId::CompDual, dual.finish());
    conditions.insert(ConditionId::Codomain, codomain.finish());
    conditions.insert(ConditionId::CompPrimal, primal_entry(s, traj, cert, &geo, opts));
    conditions.insert(ConditionId::Trans, transversality_entry(s, traj, cert, &geo, opts)?);
    conditions.insert(ConditionId::Max, max_entry(s, traj, cert, opts, false)?);
    conditions.insert(ConditionId::Nonatom, nonatom_entry(traj, cert, &geo, opts));

    let size = lambda
        + cert.p[steps].norm()
        + cert.psi.iter().map(|v| v.norm()).fold(0.0, f64::max)
        + cert.gamma.iter().map(|v| v.norm()).sum::<f64>();
    conditions.insert(ConditionId::Nontriv, nontriv(size, opts.tol));
    conditions.insert(ConditionId::NontrivEnh, vacuous("no enhanced form for the discrete problem"));
    Ok(ConditionReport {
        conditions,
        informational: BTreeMap::new(),
    })
}

fn nontriv(size: f64, tol: f64) -> ConditionEntry {
    if size > tol {
        ConditionEntry {
            status: Status::Satisfied,
            residual: 0.0,
            witnesses: Vec::new(),
        }
    } else {
        ConditionEntry {
            status: Status::Violated,
            residual: 1.0,
            witnesses: vec![format!("dual size {size:.3e} is not positive")],
        }
    }
}

/// Mesh-sampled residuals of the continuous necessary conditions along `traj`.
///
/// On cell `i` the adjoint is evaluated at the midpoint:
/// `q(t) = q_i + (p_mid - p_i)` with `p_mid = (p_i + p_{i+1}) / 2`, and the state at
/// `(x_i + x_{i+1}) / 2`.
pub fn check_continuous_conditions(
    s: &Scenario,
    traj: &DiscreteTrajectory,
    cert: &DualCertificate,
    opts: &CheckOptions,
) -> Result<ConditionReport> {
    check_inputs(s, traj, cert)?;
    let poly = &s.polyhedron;
    let g = s.theory_drift();
    let h = traj.mesh.step();
    let steps = traj.mesh.steps;
    let geo = Geometry::new(s, traj, cert, opts)?;
    let mut conditions = BTreeMap::new();
    let mut informational = BTreeMap::new();

    let mut el = Implications::new(opts.tol);
    let mut dual = Implications::new(opts.tol);
    let mut offset = Implications::new(opts.tol);
    for i in 0..steps {
        let dp = &cert.p[i + 1] - &cert.p[i];
        let qc = &cert.q[i] + &dp * 0.5;
        let xm = (&traj.states[i] + &traj.states[i + 1]) * 0.5;
        let sub = scalar_subdifferential(&g, &xm, &traj.controls[i], &qc)?;
        let required = concat(&(&dp / h), &-&cert.psi[i]);
        let d = sub.distance(&required)?;
        el.require(d / (1.0 + required.norm() + sub.magnitude()), || format!("cell {i}: adjoint inclusion"));
        for j in 0..poly.count() {
            let xs = poly.generator(j);
            let e = geo.eta[i][j];
            dual.add(geo.licq[i + 1] && e > geo.eta_threshold, xs.dot(&qc).abs() / (1.0 + xs.norm() * qc.norm()), || {
                format!("cell {i}: <x*_{j}, q> != 0 with positive multiplier")
            });
            if opts.offset_form {
                let c = poly.offsets()[j];
                offset.add(e.abs() > geo.eta_threshold, (xs.dot(&qc) - c).abs() / (1.0 + c.abs() + xs.norm() * qc.norm()), || {
                    format!("cell {i}: <x*_{j}, q> != c_{j}")
                });
            }
        }
    }
    identity_check(&mut el, poly, cert);
    conditions.insert(ConditionId::El, el.finish());
    conditions.insert(ConditionId::CompDual, dual.finish());
    conditions.insert(ConditionId::CompPrimal, primal_entry(s, traj, cert, &geo, opts));
    conditions.insert(ConditionId::Trans, transversality_entry(s, traj, cert, &geo, opts)?);
    conditions.insert(ConditionId::Max, max_entry(s, traj, cert, opts, true)?);
    conditions.insert(ConditionId::Nonatom, nonatom_entry(traj, cert, &geo, opts));
    conditions.insert(
        ConditionId::Codomain,
        vacuous("covered by the gated slackness implication (COMP_DUAL)"),
    );
    let pmax = cert.p.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let gsum: f64 = cert.gamma.iter().map(|v| v.iter().map(|x| x.abs()).sum::<f64>()).sum();
    conditions.insert(ConditionId::Nontriv, nontriv(cert.lambda + pmax + gsum, opts.tol));
    let strictly_inside = geo.interior[..steps].iter().all(|&b| b);
    conditions.insert(
        ConditionId::NontrivEnh,
        if strictly_inside {
            nontriv(cert.lambda + pmax, opts.tol)
        } else {
            vacuous("the state touches the boundary before T")
        },
    );
    if opts.offset_form {
        informational.insert("OFFSET_FORM".to_string(), offset.finish());
    }
    Ok(ConditionReport {
        conditions,
        informational,
    })
}

/// How the endpoint multipliers `eta_T` are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TerminalRule {
    /// Nonnegative least squares so that `<x*_j, p_N> = 0` on constraints with a
    /// positive multiplier in the last step.
    #[default]
    Complementary,
    /// Reuse the multiplier of the last step.
    LastStep,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisOptions {
    pub terminal: TerminalRule,
    pub convention: IndexConvention,
    pub geometry_tol: f64,
    /// Threshold on scaled residuals (sets which multipliers count as positive).
    pub tol: f64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            terminal: TerminalRule::Complementary,
            convention: IndexConvention::Homogeneous,
            geometry_tol: 1e-8,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub certificate: DualCertificate,
    /// Scaled adjoint-inclusion residual per step, as the discrete checker computes it.
    pub residuals: Vec<f64>,
    pub max_residual: f64,
}

/// `eta_T >= 0` on `active` minimizing the terminal orthogonality defect.
fn terminal_multiplier(
    poly: &Polyhedron,
    active: &[usize],
    positive: &[usize],
    base: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    let s = poly.count();
    if active.is_empty() || positive.is_empty() {
        let r = positive.iter().map(|&j| poly.generator(j).dot(base).abs()).fold(0.0, f64::max);
        return Ok((DVector::zeros(s), r));
    }
    // <x*_j, -base - sum_k eta_k x*_k> = 0 for j in `positive`.
    let e = DMatrix::from_fn(positive.len(), active.len(), |r, c| poly.generator(positive[r]).dot(poly.generator(active[c])));
    let f = DVector::from_iterator(positive.len(), positive.iter().map(|&j| -poly.generator(j).dot(base)));
    let sol = nnls(&e, &f)?;
    let mut eta = DVector::zeros(s);
    for (c, &k) in active.iter().enumerate() {
        eta[k] = sol.x[c];
    }
    Ok((eta, sol.residual_norm()))
}

/// Backward synthesis of a certificate for the discrete problem along `traj`.
pub fn synthesize_discrete_certificate(
    pr: &DiscreteProblem<'_>,
    traj: &DiscreteTrajectory,
    lambda: f64,
    opts: &SynthesisOptions,
) -> Result<Synthesis> {
    let s = pr.scenario;
    traj.check_shape(s)?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Invalid("lambda must be a finite nonnegative number".into()));
    }
    let poly = &s.polyhedron;
    let (n, d, sc) = (s.state_dim(), s.control_dim(), poly.count());
    let steps = traj.mesh.steps;
    let h = traj.mesh.step();
    for (i, x) in traj.states.iter().enumerate() {
        let v = poly.check_cq(x, CqMode::Plicq, opts.geometry_tol)?;
        if !v.holds {
            return Err(Error::ConstraintQualification(format!(
                "PLICQ fails at node {i} (active {:?})",
                v.active.indices
            )));
        }
    }
    let eta = multipliers(s, traj)?;
    let (theta_y, theta_u) = pr.theta(traj)?;
    let g = s.theory_drift();
    let max_eta = eta.iter().map(|e| e.amax()).fold(0.0, f64::max);
    let thr = opts.tol * (1.0 + max_eta);
    let active: Vec<Vec<usize>> = traj
        .states
        .iter()
        .map(|x| poly.active_indices(x, opts.geometry_tol).map(|a| a.indices))
        .collect::<Result<_>>()?;
    let positive = |i: usize| -> Vec<usize> { (0..sc).filter(|&j| eta[i][j] > thr).collect() };

    let mut cert = DualCertificate::zeros(steps, n, d, sc);
    cert.lambda = lambda;
    cert.theta_y = theta_y.clone();
    cert.theta_u = theta_u.clone();

    // Terminal data.
    let xn = traj.final_state();
    let theta_last = &theta_y[steps - 1] * (1.0 / h);
    let candidates = match s.cost.subdifferential(xn) {
        sub @ SubgradientSet::Box { .. } if sub.vertices().len() <= 4096 => sub.vertices(),
        sub => vec![sub.vertices().swap_remove(0)],
    };
    let mut best: Option<(DVector<f64>, DVector<f64>, f64)> = None;
    for v in candidates {
        let (eta_t, r) = match opts.terminal {
            TerminalRule::Complementary => {
                let base = (&v + &theta_last) * lambda;
                let pos: Vec<usize> = positive(steps - 1).into_iter().filter(|j| active[steps].contains(j)).collect();
                terminal_multiplier(poly, &active[steps], &pos, &base)?
            }
            TerminalRule::LastStep => {
                let mut e = DVector::zeros(sc);
                for &j in &active[steps] {
                    e[j] = eta[steps - 1][j];
                }
                (e, 0.0)
            }
        };
        if best.as_ref().is_none_or(|b| r < b.2) {
            best = Some((v, eta_t, r));
        }
    }
    let (vartheta, eta_t, _) = best.ok_or_else(|| Error::Numerical("empty terminal subdifferential".into()))?;
    cert.eta_t = eta_t;
    cert.p[steps] = -(&vartheta * lambda) - poly.combine(&cert.eta_t);
    cert.q[steps] = cert.p[steps].clone();

    let mut residuals = vec![0.0; steps];
    for i in (0..steps).rev() {
        let w = &cert.q[i + 1] - &theta_y[i] * (lambda / h);
        let sub = scalar_subdifferential(&g, &traj.states[i], &traj.controls[i], &w)?;
        // Pick zeta in the subdifferential and psi in N(u_i; U) with
        // zeta_u + psi = -lambda theta_u / h; the state part of zeta is free.
        let mut set = GeneratedSet::new(n + d);
        sub.add_to(&mut set);
        for k in 0..n {
            let mut e = DVector::zeros(n + d);
            e[k] = 1.0;
            set.add_free(e);
        }
        let cone = s.control_set.normal_cone(&traj.controls[i], opts.geometry_tol)?;
        let lift = |v: &DVector<f64>| concat(&DVector::zeros(n), v);
        for v in &cone.span {
            set.add_free(lift(v));
        }
        for v in &cone.cone {
            set.add_nonneg(lift(v));
        }
        let target = concat(&DVector::zeros(n), &(-&theta_u[i] * (lambda / h)));
        let near = set.nearest(&target)?;
        let mut psi = DVector::zeros(d);
        for (c, v) in near.free[n..].iter().zip(&cone.span) {
            psi.axpy(*c, v, 1.0);
        }
        for (c, v) in near.nonneg.iter().zip(&cone.cone) {
            psi.axpy(*c, v, 1.0);
        }
        let zx = DVector::from_iterator(n, (0..n).map(|k| near.point[k] - near.free[k]));
        cert.psi[i] = psi;
        cert.p[i] = &cert.p[i + 1] - &zx * h;

        // Atoms on I0 (free) and I> (nonnegative) making <x*_j, w_{i-1}> vanish
        // for constraints with a positive multiplier at this node.
        let (zero, pos) = poly.second_order_index_sets(&traj.states[i + 1], &w, opts.convention, opts.geometry_tol)?;
        let mut want: Vec<usize> = positive(i);
        if i > 0 {
            want.extend(positive(i - 1));
        }
        want.sort_unstable();
        want.dedup();
        let base = &cert.q[i + 1] - &zx * h - if i > 0 { &theta_y[i - 1] * (lambda / h) } else { DVector::zeros(n) };
        let mut gamma = DVector::zeros(sc);
        if !want.is_empty() && !(zero.is_empty() && pos.is_empty()) {
            let mut atoms = GeneratedSet::new(want.len());
            let column = |k: usize| DVector::from_iterator(want.len(), want.iter().map(|&j| poly.generator(j).dot(poly.generator(k))));
            for &k in &zero {
                atoms.add_free(column(k));
            }
            for &k in &pos {
                atoms.add_nonneg(column(k));
            }
            let rhs = DVector::from_iterator(want.len(), want.iter().map(|&j| poly.generator(j).dot(&base)));
            let near = atoms.nearest(&rhs)?;
            for (c, &k) in near.free.iter().zip(&zero) {
                gamma[k] = *c;
            }
            for (c, &k) in near.nonneg.iter().zip(&pos) {
                gamma[k] = *c;
            }
        }
        cert.q[i] = &cert.q[i + 1] - &zx * h - poly.combine(&gamma);
        cert.gamma[i] = gamma;

        let required = concat(
            &((&cert.p[i + 1] - &cert.p[i]) / h),
            &(-&theta_u[i] * (lambda / h) - &cert.psi[i]),
        );
        residuals[i] = sub.distance(&required)? / (1.0 + required.norm() + sub.magnitude());
    }
    let max_residual = residuals.iter().copied().fold(0.0, f64::max);
    Ok(Synthesis {
        certificate: cert,
        residuals,
        max_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{DriftOracle, SmoothDrift};
    use crate::dynamics::{simulate, DriftSign, Mesh, TerminalCost};
    use crate::robot::{build_robot_scenario, paper_certificate, Convention, RobotParams};
    use nalgebra::DMatrix;
    use std::sync::Arc;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    /// `x' = u - eta e_2` below the line `x_2 = 1`, steering toward `(3, 3)`.
    fn slide() -> Scenario {
        let drift: Arc<dyn DriftOracle> = Arc::new(SmoothDrift::new(
            2,
            2,
            |_x, u| u.clone(),
            |_x, _u| (DMatrix::zeros(2, 2), DMatrix::identity(2, 2)),
        ));
        Scenario::new(
            Polyhedron::new(2, vec![v(&[0.0, 1.0])], vec![1.0]).unwrap(),
            drift,
            DriftSign::Example,
            ControlSet::Box { lower: v(&[-1.0, -1.0]), upper: v(&[1.0, 1.0]) },
            v(&[0.0, 0.0]),
            2.0,
            TerminalCost::HalfNormSq { target: v(&[3.0, 3.0]) },
        )
        .unwrap()
    }

    fn slide_solution(s: &Scenario) -> DiscreteTrajectory {
        let mesh = Mesh::power_of_two(6, 2.0).unwrap();
        simulate(s, &vec![v(&[1.0, 1.0]); mesh.steps], mesh).unwrap()
    }

    #[test]
    fn sliding_optimum_satisfies_everything() {
        let s = slide();
        let traj = slide_solution(&s);
        let pr = DiscreteProblem::raw(&s, traj.mesh);
        let syn = synthesize_discrete_certificate(&pr, &traj, 1.0, &SynthesisOptions::default()).unwrap();
        let cert = &syn.certificate;
        assert!(syn.max_residual < 1e-12);
        assert!((cert.eta_t[0] - 2.0).abs() < 1e-9);
        for i in 0..=traj.mesh.steps {
            assert!((&cert.p[i] - v(&[1.0, 0.0])).norm() < 1e-9);
            assert!((&cert.q[i] - v(&[1.0, 0.0])).norm() < 1e-9);
        }
        assert!(cert.gamma.iter().all(|g| g.amax() < 1e-9));
        assert!(cert.psi.iter().all(|p| (p - v(&[1.0, 0.0])).norm() < 1e-9));
        let opts = CheckOptions::default();
        for report in [
            check_discrete_conditions(&pr, &traj, cert, &opts).unwrap(),
            check_continuous_conditions(&s, &traj, cert, &opts).unwrap(),
        ] {
            assert_eq!(report.conditions.len(), 9);
            assert!(report.passed(), "{report:?}");
            assert!(report.max_residual() < 1e-6);
        }
    }

    #[test]
    fn interior_motion_gives_trivial_measure() {
        let s = slide();
        let mesh = Mesh::power_of_two(4, 2.0).unwrap();
        let traj = simulate(&s, &vec![v(&[0.25, 0.25]); mesh.steps], mesh).unwrap();
        let pr = DiscreteProblem::raw(&s, mesh);
        let cert = synthesize_discrete_certificate(&pr, &traj, 1.0, &SynthesisOptions::default())
            .unwrap()
            .certificate;
        assert!(cert.gamma.iter().all(|g| g.amax() == 0.0));
        assert_eq!(cert.p, cert.q);
        assert!(cert.p.iter().all(|p| p == &cert.p[0]));
    }

    #[test]
    fn synthesis_residual_matches_checker() {
        let p = RobotParams::default();
        let s = build_robot_scenario(&p).unwrap();
        let mesh = Mesh::power_of_two(8, 6.0).unwrap();
        let traj = simulate(&s, &vec![v(&[3.0, 1.5]); mesh.steps], mesh).unwrap();
        let pr = DiscreteProblem::raw(&s, mesh);
        let syn = synthesize_discrete_certificate(&pr, &traj, 1.0, &SynthesisOptions::default()).unwrap();
        let report = check_discrete_conditions(&pr, &traj, &syn.certificate, &CheckOptions::default()).unwrap();
        let el_steps = syn.residuals.iter().copied().fold(0.0, f64::max);
        let identity = syn
            .certificate
            .identity_residuals(&s.polyhedron)
            .into_iter()
            .fold(0.0, f64::max);
        assert!(identity < 1e-12);
        assert!((report.conditions[&ConditionId::El].residual - el_steps).abs() <= 1e-12);
        // The robot drift does not depend on the state.
        let p0 = &syn.certificate.p[0];
        assert!(syn.certificate.p.iter().all(|p| (p - p0).norm() < 1e-10));
    }

    #[test]
    fn tampering_is_detected() {
        let s = slide();
        let traj = slide_solution(&s);
        let pr = DiscreteProblem::raw(&s, traj.mesh);
        let cert = synthesize_discrete_certificate(&pr, &traj, 1.0, &SynthesisOptions::default())
            .unwrap()
            .certificate;
        let opts = CheckOptions::default();

        let zero = DualCertificate::zeros(traj.mesh.steps, 2, 2, 1);
        let r = check_discrete_conditions(&pr, &traj, &zero, &opts).unwrap();
        assert_eq!(r.conditions[&ConditionId::Nontriv].status, Status::Violated);

        // A negative atom on a constraint in I>: steer w so that <x*, w> > 0.
        let mut bad = cert.clone();
        let last = traj.mesh.steps - 1;
        bad.q[last + 1] = &bad.q[last + 1] + v(&[0.0, 0.5]);
        bad.p[last + 1] = bad.q[last + 1].clone();
        bad.gamma[last][0] = -0.25;
        let r = check_discrete_conditions(&pr, &traj, &bad, &opts).unwrap();
        assert_eq!(r.conditions[&ConditionId::CompDual].status, Status::Violated);

        let mut bad = cert.clone();
        bad.psi[3] = v(&[-1.0, 0.0]);
        let r = check_discrete_conditions(&pr, &traj, &bad, &opts).unwrap();
        assert_eq!(r.conditions[&ConditionId::Max].status, Status::Violated);
        assert_eq!(r.conditions[&ConditionId::El].status, Status::Violated);

        let mut bad = cert.clone();
        bad.gamma[0][0] = 0.5;
        let r = check_continuous_conditions(&s, &traj, &bad, &opts).unwrap();
        assert_eq!(r.conditions[&ConditionId::Nonatom].status, Status::Violated);
    }

    #[test]
    fn zero_covector_maximizes() {
        let (from, to) = crate::robot::control_segment();
        let u = ControlSet::Segment { from: from.clone(), to: to.clone() };
        assert_eq!(maximization_residual(&u, &v(&[0.0, 0.0]), &v(&[1.0, 0.5])).unwrap(), 0.0);
        assert_eq!(maximization_residual(&u, &to, &to).unwrap(), 0.0);
        let psi = v(&[-1.0, -0.5]);
        let ubar = v(&[1.0, 0.5]);
        let expected = psi.dot(&from) - psi.dot(&ubar);
        assert_eq!(maximization_residual(&u, &psi, &ubar).unwrap(), expected);
        assert!(maximization_residual(&u, &psi, &v(&[5.0, 0.0])).is_err());
    }

    #[test]
    fn literal_case_reports_inconsistencies() {
        let mesh = Mesh::power_of_two(8, 6.0).unwrap();
        let case = paper_certificate(1, mesh).unwrap();
        let cert = case.certificate.unwrap();
        let s = build_robot_scenario(&RobotParams::with_convention(Convention::PaperLiteral)).unwrap();
        let opts = CheckOptions {
            offset_form: true,
            ..CheckOptions::default()
        };
        let r = check_continuous_conditions(&s, &case.trajectory, &cert, &opts).unwrap();
        // The printed multiplier is negative, so the gated implication never fires.
        assert_eq!(r.conditions[&ConditionId::CompDual].status, Status::Vacuous);
        assert_eq!(r.conditions[&ConditionId::Max].status, Status::Satisfied);
        assert_eq!(r.conditions[&ConditionId::CompPrimal].status, Status::Violated);
        assert!(r.informational.contains_key("OFFSET_FORM"));
    }

    #[test]
    fn implication_aggregation() {
        let mut imp = Implications::new(1e-6);
        imp.add(false, 10.0, String::new);
        assert_eq!(imp.clone().finish().status, Status::Vacuous);
        imp.add(true, 1e-9, String::new);
        assert_eq!(imp.clone().finish().status, Status::Satisfied);
        imp.add(true, 1.0, || "w".into());
        let e = imp.finish();
        assert_eq!(e.status, Status::Violated);
        assert_eq!(e.witnesses.len(), 1);
    }
}
