//! Euler-discretized optimal control problems over a uniform mesh.
//!
//! Raw mode minimizes `phi(x_N)`. Proximal mode adds
//! `1/2 sum_i int_{t_i}^{t_{i+1}} ||(x_{i+1}-x_i)/h - xbar'(t)||^2 + ||u_i - ubar(t)||^2 dt`
//! around a reference pair, pins `u_0 = ubar(0)` and enforces the localization
//! bound `int ... <= eps/2`.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::dynamics::{simulate, ControlSet, DiscreteTrajectory, Mesh, Scenario};
use crate::error::{check_dim, Error, Result};

/// Reference velocity and control on `[0, T]`.
pub trait Reference: Send + Sync + fmt::Debug {
    /// Right derivative of the reference state at `t`.
    fn velocity(&self, t: f64) -> DVector<f64>;
    fn control(&self, t: f64) -> DVector<f64>;
    /// When `Some`, velocity and control are constant between consecutive
    /// breakpoints and cell integrals are computed exactly.
    fn breakpoints(&self) -> Option<Vec<f64>>;
}

/// Piecewise-constant reference (velocity and control constant on each piece).
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseReference {
    nodes: Vec<f64>,
    velocities: Vec<DVector<f64>>,
    controls: Vec<DVector<f64>>,
}

impl PiecewiseReference {
    pub fn new(nodes: Vec<f64>, velocities: Vec<DVector<f64>>, controls: Vec<DVector<f64>>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Invalid("reference needs at least one piece".into()));
        }
        check_dim(nodes.len() - 1, velocities.len(), "reference velocities")?;
        check_dim(nodes.len() - 1, controls.len(), "reference controls")?;
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Invalid("reference nodes must increase".into()));
        }
        Ok(PiecewiseReference {
            nodes,
            velocities,
            controls,
        })
    }

    /// Slopes and controls of a discrete trajectory as a reference.
    pub fn from_trajectory(traj: &DiscreteTrajectory) -> Self {
        let h = traj.mesh.step();
        let nodes = (0..=traj.mesh.steps).map(|i| traj.mesh.node(i)).collect();
        let velocities = traj.states.windows(2).map(|w| (&w[1] - &w[0]) / h).collect();
        PiecewiseReference {
            nodes,
            velocities,
            controls: traj.controls.clone(),
        }
    }

    fn piece(&self, t: f64) -> usize {
        let k = self.nodes.partition_point(|&s| s <= t);
        k.saturating_sub(1).min(self.velocities.len() - 1)
    }
}

impl Reference for PiecewiseReference {
    fn velocity(&self, t: f64) -> DVector<f64> {
        self.velocities[self.piece(t)].clone()
    }
    fn control(&self, t: f64) -> DVector<f64> {
        self.controls[self.piece(t)].clone()
    }
    fn breakpoints(&self) -> Option<Vec<f64>> {
        Some(self.nodes.clone())
    }
}

type TimeFn = dyn Fn(f64) -> DVector<f64> + Send + Sync;

/// Reference given by closures; cell integrals use 4-point Gauss-Legendre.
#[derive(Clone)]
pub struct FnReference {
    velocity: Arc<TimeFn>,
    control: Arc<TimeFn>,
}

impl FnReference {
    pub fn new(
        velocity: impl Fn(f64) -> DVector<f64> + Send + Sync + 'static,
        control: impl Fn(f64) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        FnReference {
            velocity: Arc::new(velocity),
            control: Arc::new(control),
        }
    }
}

impl fmt::Debug for FnReference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FnReference")
    }
}

impl Reference for FnReference {
    fn velocity(&self, t: f64) -> DVector<f64> {
        (self.velocity)(t)
    }
    fn control(&self, t: f64) -> DVector<f64> {
        (self.control)(t)
    }
    fn breakpoints(&self) -> Option<Vec<f64>> {
        None
    }
}

#[derive(Debug, Clone)]
pub enum Mode {
    Raw,
    Proximal {
        reference: Arc<dyn Reference>,
        epsilon: f64,
    },
}

#[derive(Debug, Clone)]
pub struct DiscreteProblem<'a> {
    pub scenario: &'a Scenario,
    pub mesh: Mesh,
    pub mode: Mode,
}

/// Result of a solver.
#[derive(Debug, Clone)]
pub struct Solution {
    pub controls: Vec<DVector<f64>>,
    pub trajectory: DiscreteTrajectory,
    pub cost: f64,
    pub evaluations: u64,
    /// Best-so-far cost after each accepted move (nonincreasing).
    pub trace: Vec<f64>,
}

const GAUSS4: [(f64, f64); 4] = [
    (-0.861_136_311_594_052_6, 0.347_854_845_137_453_85),
    (-0.339_981_043_584_856_26, 0.652_145_154_862_546_1),
    (0.339_981_043_584_856_26, 0.652_145_154_862_546_1),
    (0.861_136_311_594_052_6, 0.347_854_845_137_453_85),
];

/// `int_a^b F(t) dt` where `F` is constant between the reference breakpoints or
/// smooth enough for Gauss-Legendre.
fn cell_integral<F>(reference: &dyn Reference, a: f64, b: f64, f: F) -> DVector<f64>
where
    F: Fn(f64) -> DVector<f64>,
{
    match reference.breakpoints() {
        Some(bp) => {
            let mut cuts = vec![a];
            cuts.extend(bp.into_iter().filter(|&t| t > a && t < b));
            cuts.push(b);
            let mut acc: Option<DVector<f64>> = None;
            for w in cuts.windows(2) {
                if w[1] <= w[0] {
                    continue;
                }
                let v = f(0.5 * (w[0] + w[1])) * (w[1] - w[0]);
                acc = Some(match acc {
                    Some(s) => s + v,
                    None => v,
                });
            }
            acc.unwrap_or_else(|| f(a) * 0.0)
        }
        None => {
            let mid = 0.5 * (a + b);
            let half = 0.5 * (b - a);
            let mut acc = f(mid + half * GAUSS4[0].0) * (GAUSS4[0].1 * half);
            for &(x, w) in &GAUSS4[1..] {
                acc += f(mid + half * x) * (w * half);
            }
            acc
        }
    }
}

impl<'a> DiscreteProblem<'a> {
    pub fn raw(scenario: &'a Scenario, mesh: Mesh) -> Self {
        DiscreteProblem {
            scenario,
            mesh,
            mode: Mode::Raw,
        }
    }

    pub fn proximal(scenario: &'a Scenario, mesh: Mesh, reference: Arc<dyn Reference>, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::Invalid("localization radius must be positive".into()));
        }
        Ok(DiscreteProblem {
            scenario,
            mesh,
            mode: Mode::Proximal { reference, epsilon },
        })
    }

    fn check_mesh(&self, traj: &DiscreteTrajectory) -> Result<()> {
        if traj.mesh != self.mesh {
            return Err(Error::Invalid("trajectory mesh differs from the problem mesh".into()));
        }
        Ok(())
    }

    /// `(int ||dx/h - xbar'||^2, int ||u - ubar||^2)` per cell.
    fn proximity_terms(&self, reference: &dyn Reference, traj: &DiscreteTrajectory) -> Vec<(f64, f64)> {
        let h = self.mesh.step();
        (0..self.mesh.steps)
            .map(|i| {
                let a = self.mesh.node(i);
                let b = self.mesh.node(i + 1);
                let slope = (&traj.states[i + 1] - &traj.states[i]) / h;
                let u = &traj.controls[i];
                let y = cell_integral(reference, a, b, |t| {
                    DVector::from_element(1, (&slope - reference.velocity(t)).norm_squared())
                })[0];
                let c = cell_integral(reference, a, b, |t| {
                    DVector::from_element(1, (u - reference.control(t)).norm_squared())
                })[0];
                (y, c)
            })
            .collect()
    }

    /// `J_m` of the trajectory.
    pub fn cost(&self, traj: &DiscreteTrajectory) -> Result<f64> {
        self.check_mesh(traj)?;
        let terminal = self.scenario.cost.value(traj.final_state());
        match &self.mode {
            Mode::Raw => Ok(terminal),
            Mode::Proximal { reference, .. } => {
                let s: f64 = self
                    .proximity_terms(reference.as_ref(), traj)
                    .iter()
                    .map(|(a, b)| a + b)
                    .sum();
                Ok(terminal + 0.5 * s)
            }
        }
    }

    /// `true` unless proximal mode is active and the localization bound fails.
    pub fn localized(&self, traj: &DiscreteTrajectory) -> Result<bool> {
        self.check_mesh(traj)?;
        match &self.mode {
            Mode::Raw => Ok(true),
            Mode::Proximal { reference, epsilon } => {
                let s: f64 = self
                    .proximity_terms(reference.as_ref(), traj)
                    .iter()
                    .map(|(a, b)| a + b)
                    .sum();
                Ok(s <= 0.5 * epsilon)
            }
        }
    }

    /// Auxiliary vectors `theta_iy = int (dx/h - xbar')`, `theta_iu = int (u_i - ubar)`
    /// (zero in raw mode).
    pub fn theta(&self, traj: &DiscreteTrajectory) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
        self.check_mesh(traj)?;
        let n = self.scenario.state_dim();
        let d = self.scenario.control_dim();
        match &self.mode {
            Mode::Raw => Ok((
                vec![DVector::zeros(n); self.mesh.steps],
                vec![DVector::zeros(d); self.mesh.steps],
            )),
            Mode::Proximal { reference, .. } => {
                let h = self.mesh.step();
                let mut ty = Vec::with_capacity(self.mesh.steps);
                let mut tu = Vec::with_capacity(self.mesh.steps);
                for i in 0..self.mesh.steps {
                    let a = self.mesh.node(i);
                    let b = self.mesh.node(i + 1);
                    let slope = (&traj.states[i + 1] - &traj.states[i]) / h;
                    let u = traj.controls[i].clone();
                    ty.push(cell_integral(reference.as_ref(), a, b, |t| &slope - reference.velocity(t)));
                    tu.push(cell_integral(reference.as_ref(), a, b, |t| &u - reference.control(t)));
                }
                Ok((ty, tu))
            }
        }
    }

    /// Simulates and prices a control sequence; infeasible sequences (proximal
    /// localization failure) cost `+inf`.
    pub fn evaluate(&self, controls: &[DVector<f64>]) -> Result<(DiscreteTrajectory, f64)> {
        let mut controls = controls.to_vec();
        if let Mode::Proximal { reference, .. } = &self.mode {
            if let Some(first) = controls.first_mut() {
                *first = reference.control(0.0);
            }
        }
        let traj = simulate(self.scenario, &controls, self.mesh)?;
        let cost = if self.localized(&traj)? {
            self.cost(&traj)?
        } else {
            f64::INFINITY
        };
        Ok((traj, cost))
    }
}

/// Exhaustive grid over `U`, optionally with `pieces` piecewise-constant blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub delta: f64,
    pub pieces: usize,
    pub budget: u128,
}

impl GridSpec {
    pub fn constant(delta: f64) -> Self {
        GridSpec {
            delta,
            pieces: 1,
            budget: 10_000_000,
        }
    }
}

/// Grid points of `U` with spacing `delta` in the natural parameterization.
pub fn grid_points(u: &ControlSet, delta: f64) -> Result<Vec<DVector<f64>>> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Invalid("grid spacing must lie in (0, 1]".into()));
    }
    let k = {
        let r = (1.0 / delta).round();
        if (r * delta - 1.0).abs() < 1e-9 {
            r as usize
        } else {
            (1.0 / delta).ceil() as usize
        }
    };
    let fractions: Vec<f64> = (0..=k).map(|i| if i == k { 1.0 } else { i as f64 / k as f64 }).collect();
    match u {
        ControlSet::Segment { from, to } => Ok(fractions
            .iter()
            .map(|&t| ControlSet::segment_point(from, to, t))
            .collect()),
        ControlSet::Box { lower, upper } => {
            let d = lower.len();
            if d > 3 {
                return Err(Error::Invalid("box grids are limited to dimension 3".into()));
            }
            let per = fractions.len();
            let mut out = Vec::with_capacity(per.pow(d as u32));
            for idx in 0..per.pow(d as u32) {
                let mut rem = idx;
                let mut p = DVector::zeros(d);
                for c in (0..d).rev() {
                    let f = fractions[rem % per];
                    rem /= per;
                    p[c] = if f == 1.0 { upper[c] } else { lower[c] + f * (upper[c] - lower[c]) };
                }
                out.push(p);
            }
            Ok(out)
        }
        ControlSet::Finite(points) => Ok(points.clone()),
    }
}

fn lex_cmp(a: &[DVector<f64>], b: &[DVector<f64>]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.iter().zip(y.iter()) {
            match p.total_cmp(q) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
    }
    Ordering::Equal
}

/// Expands piece values to one control per step.
pub fn expand_pieces(pieces: &[DVector<f64>], steps: usize) -> Vec<DVector<f64>> {
    let k = pieces.len();
    (0..steps).map(|i| pieces[i * k / steps].clone()).collect()
}

/// Evaluates every grid candidate and returns the minimum (ties: the
/// lexicographically smallest piece sequence). Uses the current rayon pool.
pub fn solve_grid(pr: &DiscreteProblem<'_>, spec: GridSpec) -> Result<Solution> {
    if spec.pieces == 0 || spec.pieces > pr.mesh.steps {
        return Err(Error::Invalid("pieces must lie in 1..=N".into()));
    }
    let grid = grid_points(&pr.scenario.control_set, spec.delta)?;
    let g = grid.len() as u128;
    let total = g.checked_pow(spec.pieces as u32).unwrap_or(u128::MAX);
    if total > spec.budget {
        return Err(Error::Budget {
            needed: total,
            budget: spec.budget,
        });
    }
    let decode = |idx: u128| -> Vec<DVector<f64>> {
        let mut rem = idx;
        let mut out = vec![grid[0].clone(); spec.pieces];
        for p in (0..spec.pieces).rev() {
            out[p] = grid[(rem % g) as usize].clone();
            rem /= g;
        }
        out
    };
    let costs: Vec<Result<f64>> = (0..total as u64)
        .into_par_iter()
        .map(|idx| {
            let pieces = decode(idx as u128);
            pr.evaluate(&expand_pieces(&pieces, pr.mesh.steps)).map(|(_, c)| c)
        })
        .collect();
    let mut best: Option<(f64, u64)> = None;
    for (idx, c) in costs.into_iter().enumerate() {
        let c = c?;
        let idx = idx as u64;
        best = match best {
            None => Some((c, idx)),
            Some((bc, bi)) => {
                let better = c < bc
                    || (c == bc && lex_cmp(&decode(idx as u128), &decode(bi as u128)) == Ordering::Less);
                Some(if better { (c, idx) } else { (bc, bi) })
            }
        };
    }
    let (cost, idx) = best.ok_or_else(|| Error::Invalid("empty grid".into()))?;
    if !cost.is_finite() {
        return Err(Error::Invalid("no grid candidate satisfies the localization bound".into()));
    }
    let controls = expand_pieces(&decode(idx as u128), pr.mesh.steps);
    let (trajectory, cost) = pr.evaluate(&controls)?;
    Ok(Solution {
        controls: trajectory.controls.clone(),
        trajectory,
        cost,
        evaluations: total as u64,
        trace: vec![cost],
    })
}

/// Options of [`solve_refine`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineOptions {
    /// Initial compass step in parameter units (segment parameter or box
    /// coordinates scaled to `[0,1]`).
    pub initial_step: f64,
    pub min_step: f64,
    pub max_evaluations: u64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            initial_step: 0.125,
            min_step: 1e-6,
            max_evaluations: 200_000,
        }
    }
}

/// Smallest power-of-two block count on which the controls are piecewise constant.
fn detect_pieces(controls: &[DVector<f64>]) -> usize {
    let n = controls.len();
    let mut k = 1;
    while k < n {
        if n.is_multiple_of(k) && (0..n).all(|i| controls[i] == controls[(i * k / n) * n / k]) {
            return k;
        }
        k *= 2;
    }
    n
}

/// Deterministic compass search over the piecewise-constant control
/// parameterization, starting from `initial`. Never returns a worse cost.
pub fn solve_refine(pr: &DiscreteProblem<'_>, initial: &Solution, opts: RefineOptions) -> Result<Solution> {
    let steps = pr.mesh.steps;
    check_dim(steps, initial.controls.len(), "initial controls")?;
    let u = &pr.scenario.control_set;
    let k = detect_pieces(&initial.controls);
    let piece0: Vec<DVector<f64>> = (0..k).map(|p| initial.controls[p * steps / k].clone()).collect();

    // Parameters: segment -> tau per piece; box -> normalized coordinates.
    let (mut params, dims) = match u {
        ControlSet::Segment { from, to } => (
            piece0.iter().map(|c| ControlSet::segment_parameter(from, to, c).clamp(0.0, 1.0)).collect::<Vec<_>>(),
            1,
        ),
        ControlSet::Box { lower, upper } => {
            let d = lower.len();
            let mut v = Vec::with_capacity(k * d);
            for c in &piece0 {
                for j in 0..d {
                    let w = upper[j] - lower[j];
                    v.push(if w > 0.0 { ((c[j] - lower[j]) / w).clamp(0.0, 1.0) } else { 0.0 });
                }
            }
            (v, d)
        }
        ControlSet::Finite(_) => {
            let mut s = initial.clone();
            s.trace = vec![initial.cost];
            return Ok(s);
        }
    };
    let to_controls = |p: &[f64]| -> Vec<DVector<f64>> {
        let pieces: Vec<DVector<f64>> = (0..k)
            .map(|b| match u {
                ControlSet::Segment { from, to } => ControlSet::segment_point(from, to, p[b]),
                ControlSet::Box { lower, upper } => DVector::from_iterator(
                    dims,
                    (0..dims).map(|j| {
                        let f = p[b * dims + j];
                        if f == 1.0 { upper[j] } else { lower[j] + f * (upper[j] - lower[j]) }
                    }),
                ),
                ControlSet::Finite(_) => unreachable!(),
            })
            .collect();
        expand_pieces(&pieces, steps)
    };
    let mut evaluations = 0u64;
    let (mut best_traj, mut best) = pr.evaluate(&to_controls(&params))?;
    evaluations += 1;
    let mut best_controls = best_traj.controls.clone();
    // Keep the caller's point if the reparameterized one is worse.
    if initial.cost < best {
        best = initial.cost;
        best_traj = initial.trajectory.clone();
        best_controls = initial.controls.clone();
    }
    let mut trace = vec![best];
    let mut step = opts.initial_step;
    while step >= opts.min_step && evaluations < opts.max_evaluations {
        let mut improved = false;
        'poll: for c in 0..params.len() {
            for dir in [1.0, -1.0] {
                let mut cand = params.clone();
                cand[c] = (cand[c] + dir * step).clamp(0.0, 1.0);
                if cand[c] == params[c] {
                    continue;
                }
                let (traj, cost) = pr.evaluate(&to_controls(&cand))?;
                evaluations += 1;
                if cost < best {
                    best = cost;
                    params = cand;
                    best_controls = traj.controls.clone();
                    best_traj = traj;
                    trace.push(best);
                    improved = true;
                    break 'poll;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    Ok(Solution {
        controls: best_controls,
        trajectory: best_traj,
        cost: best,
        evaluations: initial.evaluations + evaluations,
        trace,
    })
}

/// One row of [`convergence_study`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub power: u32,
    pub step: f64,
    /// `max_i ||x_i - xbar(t_i)||`
    pub node_error: f64,
    /// `sup_t ||x_h(t) - xbar(t)||` for the sample-and-hold interpolant `x_h`.
    pub hold_error: f64,
    /// `||u_h - ubar||_{L^2}`
    pub control_error: f64,
}

/// Simulates `controls(t_i)` on meshes `2^m` and measures the error against
/// `analytic` when given, otherwise against the finest mesh.
pub fn convergence_study(
    s: &Scenario,
    controls: &dyn Fn(f64) -> DVector<f64>,
    powers: &[u32],
    analytic: Option<&dyn Fn(f64) -> DVector<f64>>,
) -> Result<Vec<ConvergenceRow>> {
    if powers.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid("mesh powers must increase".into()));
    }
    let Some(&finest) = powers.last() else {
        return Ok(Vec::new());
    };
    let run = |m: u32| -> Result<DiscreteTrajectory> {
        let mesh = Mesh::power_of_two(m, s.horizon)?;
        let us: Vec<DVector<f64>> = (0..mesh.steps).map(|i| controls(mesh.node(i))).collect();
        simulate(s, &us, mesh)
    };
    let fine = if analytic.is_none() { Some(run(finest)?) } else { None };
    let exact = |t: f64| -> DVector<f64> {
        match (analytic, &fine) {
            (Some(f), _) => f(t),
            (None, Some(tr)) => {
                let h = tr.mesh.step();
                let pos = (t / h).clamp(0.0, tr.mesh.steps as f64);
                let i = (pos.floor() as usize).min(tr.mesh.steps - 1);
                let w = pos - i as f64;
                &tr.states[i] * (1.0 - w) + &tr.states[i + 1] * w
            }
            (None, None) => unreachable!(),
        }
    };
    let mut rows = Vec::with_capacity(powers.len());
    for &m in powers {
        let tr = run(m)?;
        let h = tr.mesh.step();
        let mut node = 0.0f64;
        let mut hold = 0.0f64;
        let mut l2 = 0.0f64;
        for i in 0..=tr.mesh.steps {
            let t = tr.mesh.node(i);
            node = node.max((&tr.states[i] - exact(t)).norm());
            if i < tr.mesh.steps {
                for k in 0..=8 {
                    let tk = t + h * k as f64 / 8.0;
                    hold = hold.max((&tr.states[i] - exact(tk)).norm());
                }
                for &(x, w) in &GAUSS4 {
                    let tq = t + 0.5 * h * (1.0 + x);
                    l2 += 0.5 * h * w * (&tr.controls[i] - controls(tq)).norm_squared();
                }
            }
        }
        rows.push(ConvergenceRow {
            power: m,
            step: h,
            node_error: node,
            hold_error: hold,
            control_error: l2.sqrt(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{DriftOracle, SmoothDrift};
    use crate::dynamics::{DriftSign, TerminalCost};
    use crate::polyhedra::Polyhedron;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    /// `x' = u` in the plane, box controls, quadratic target.
    fn steering(target: DVector<f64>, u: ControlSet) -> Scenario {
        let drift: Arc<dyn DriftOracle> = Arc::new(SmoothDrift::new(
            2,
            2,
            |_x, u| u.clone(),
            |_x, _u| (DMatrix::zeros(2, 2), DMatrix::identity(2, 2)),
        ));
        Scenario::new(
            Polyhedron::unconstrained(2),
            drift,
            DriftSign::Example,
            u,
            v(&[0.0, 0.0]),
            1.0,
            TerminalCost::HalfNormSq { target },
        )
        .unwrap()
    }

    #[test]
    fn proximal_cost_vanishes_on_reference() {
        let s = steering(v(&[0.3, -0.2]), ControlSet::Box { lower: v(&[-1.0, -1.0]), upper: v(&[1.0, 1.0]) });
        let mesh = Mesh::power_of_two(5, 1.0).unwrap();
        let us: Vec<_> = (0..32).map(|i| v(&[(i as f64 / 32.0) - 0.5, 0.25])).collect();
        let traj = simulate(&s, &us, mesh).unwrap();
        let reference = Arc::new(PiecewiseReference::from_trajectory(&traj));
        let pr = DiscreteProblem::proximal(&s, mesh, reference, 1.0).unwrap();
        assert_eq!(pr.cost(&traj).unwrap(), s.cost.value(traj.final_state()));
        let (ty, tu) = pr.theta(&traj).unwrap();
        assert!(ty.iter().chain(tu.iter()).all(|t| t.norm() == 0.0));
    }

    #[test]
    fn proximal_cost_matches_closed_form_for_offset_controls() {
        let s = steering(v(&[0.0, 0.0]), ControlSet::Box { lower: v(&[-1.0, -1.0]), upper: v(&[1.0, 1.0]) });
        let mesh = Mesh::power_of_two(3, 1.0).unwrap();
        let base = simulate(&s, &vec![v(&[0.0, 0.0]); 8], mesh).unwrap();
        let reference = Arc::new(PiecewiseReference::from_trajectory(&base));
        let pr = DiscreteProblem::proximal(&s, mesh, reference, 10.0).unwrap();
        let moved = simulate(&s, &vec![v(&[0.5, 0.0]); 8], mesh).unwrap();
        // velocity and control both differ by 0.5 on [0,1]
        let expected = s.cost.value(moved.final_state()) + 0.5 * (0.25 + 0.25);
        assert_abs_diff_eq!(pr.cost(&moved).unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn gauss_legendre_integrates_cubics_exactly() {
        let r = FnReference::new(|t| DVector::from_element(1, t * t * t), |_t| DVector::zeros(1));
        let got = cell_integral(&r, 0.5, 2.0, |t| r.velocity(t));
        assert_abs_diff_eq!(got[0], (2f64.powi(4) - 0.5f64.powi(4)) / 4.0, epsilon = 1e-13);
    }

    #[test]
    fn grid_finds_interior_optimum_and_refine_converges() {
        let target = v(&[0.3, -0.2]);
        let s = steering(target.clone(), ControlSet::Box { lower: v(&[-1.0, -1.0]), upper: v(&[1.0, 1.0]) });
        let mesh = Mesh::power_of_two(4, 1.0).unwrap();
        let pr = DiscreteProblem::raw(&s, mesh);
        let grid = solve_grid(&pr, GridSpec::constant(0.25)).unwrap();
        assert_eq!(grid.controls[0], v(&[0.5, 0.0]));
        let refined = solve_refine(&pr, &grid, RefineOptions::default()).unwrap();
        assert!((&refined.controls[0] - &target).norm() < 1e-4);
        assert!(refined.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(refined.cost <= grid.cost);
    }

    #[test]
    fn singleton_and_finite_sets() {
        let s = steering(v(&[1.0, 1.0]), ControlSet::Finite(vec![v(&[0.2, 0.2])]));
        let pr = DiscreteProblem::raw(&s, Mesh::new(4, 1.0).unwrap());
        let sol = solve_grid(&pr, GridSpec::constant(0.5)).unwrap();
        assert_eq!(sol.controls[0], v(&[0.2, 0.2]));
        let r = solve_refine(&pr, &sol, RefineOptions::default()).unwrap();
        assert_eq!(r.controls, sol.controls);

        let s = steering(v(&[0.0, 0.0]), ControlSet::Finite(vec![v(&[1.0, 0.0]), v(&[-1.0, 0.0])]));
        let pr = DiscreteProblem::raw(&s, Mesh::new(4, 1.0).unwrap());
        // equal costs: lexicographically smaller control wins
        assert_eq!(solve_grid(&pr, GridSpec::constant(0.5)).unwrap().controls[0], v(&[-1.0, 0.0]));
    }

    #[test]
    fn budget_is_enforced() {
        let s = steering(v(&[0.0, 0.0]), ControlSet::Box { lower: v(&[-1.0, -1.0]), upper: v(&[1.0, 1.0]) });
        let pr = DiscreteProblem::raw(&s, Mesh::new(8, 1.0).unwrap());
        let spec = GridSpec { delta: 0.5, pieces: 4, budget: 1000 };
        assert!(matches!(solve_grid(&pr, spec), Err(Error::Budget { .. })));
    }

    #[test]
    fn piecewise_grid_beats_constant_grid() {
        // Finite set {-1, +1} in 1-D steering: with two pieces the controls can
        // cancel and reach the origin exactly.
        let drift: Arc<dyn DriftOracle> = Arc::new(SmoothDrift::new(
            1,
            1,
            |_x, u| u.clone(),
            |_x, _u| (DMatrix::zeros(1, 1), DMatrix::identity(1, 1)),
        ));
        let s = Scenario::new(
            Polyhedron::unconstrained(1),
            drift,
            DriftSign::Example,
            ControlSet::Finite(vec![v(&[-1.0]), v(&[1.0])]),
            v(&[0.0]),
            1.0,
            TerminalCost::HalfNormSq { target: v(&[0.0]) },
        )
        .unwrap();
        let pr = DiscreteProblem::raw(&s, Mesh::new(4, 1.0).unwrap());
        let one = solve_grid(&pr, GridSpec::constant(1.0)).unwrap();
        let two = solve_grid(&pr, GridSpec { delta: 1.0, pieces: 2, budget: 100 }).unwrap();
        assert_abs_diff_eq!(one.cost, 0.5, epsilon = 1e-14);
        assert_eq!(two.cost, 0.0);
        assert_eq!(two.evaluations, 4);
    }

    #[test]
    fn zero_and_constant_drift_convergence_is_exact() {
        let s = steering(v(&[0.0, 0.0]), ControlSet::Box { lower: v(&[-1.0, -1.0]), upper: v(&[1.0, 1.0]) });
        let u = |_t: f64| v(&[0.0, 0.0]);
        let rows = convergence_study(&s, &u, &[2, 3, 4], None).unwrap();
        assert!(rows.iter().all(|r| r.node_error == 0.0 && r.hold_error == 0.0));
        let u = |_t: f64| v(&[0.5, -0.25]);
        let exact = |t: f64| v(&[0.5 * t, -0.25 * t]);
        let rows = convergence_study(&s, &u, &[2, 3, 4], Some(&exact)).unwrap();
        assert!(rows.iter().all(|r| r.node_error < 1e-15));
    }
}
