//! Convex polyhedra `C = { x : <x*_j, x> <= c_j, j = 1..s }`.
//!
//! Membership, active sets, constraint qualifications, Euclidean projection with
//! multipliers, normal-cone decomposition and the second-order index sets `I0`,
//! `I>` used by the coderivative estimate.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{ldp, nnls, GeneratedSet};

/// Default absolute tolerance for geometric tests.
pub const DEFAULT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Polyhedron {
    dim: usize,
    generators: Vec<DVector<f64>>,
    offsets: Vec<f64>,
}

/// Indices `j` (ascending) of the constraints active at a point.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ActiveSet {
    pub indices: Vec<usize>,
}

impl ActiveSet {
    pub fn contains(&self, j: usize) -> bool {
        self.indices.binary_search(&j).is_ok()
    }
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
    pub fn len(&self) -> usize {
        self.indices.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub point: DVector<f64>,
    /// One nonnegative multiplier per generator; `z - point = sum_j lambda_j x*_j`.
    pub multipliers: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CqMode {
    Plicq,
    Licq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CqVerdict {
    pub holds: bool,
    /// On failure, a nonzero coefficient vector (length `s`, zero off the active
    /// set) with `sum_j alpha_j x*_j = 0`. Nonnegative with max entry 1 in PLICQ mode.
    pub witness: Option<DVector<f64>>,
    pub active: ActiveSet,
}

/// Threshold used to split active indices by the sign of `<x*_j, y>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IndexConvention {
    /// Compare `<x*_j, y>` with `c_j`.
    PaperLiteral,
    /// Compare `<x*_j, y>` with `0`.
    #[default]
    Homogeneous,
}

impl Polyhedron {
    /// Builds `C` from generators and offsets. Every generator must be nonzero and
    /// of dimension `dim`.
    pub fn new(dim: usize, generators: Vec<DVector<f64>>, offsets: Vec<f64>) -> Result<Self> {
        check_dim(generators.len(), offsets.len(), "offset count")?;
        for (j, g) in generators.iter().enumerate() {
            check_dim(dim, g.len(), "generator length")?;
            if g.iter().all(|&v| v == 0.0) {
                return Err(Error::Invalid(format!("generator {j} is zero")));
            }
            if g.iter().any(|v| !v.is_finite()) || !offsets[j].is_finite() {
                return Err(Error::Invalid(format!("constraint {j} has non-finite data")));
            }
        }
        Ok(Polyhedron {
            dim,
            generators,
            offsets,
        })
    }

    /// The whole space `R^dim` (no constraints).
    pub fn unconstrained(dim: usize) -> Self {
        Polyhedron {
            dim,
            generators: Vec::new(),
            offsets: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.generators.len()
    }

    pub fn generators(&self) -> &[DVector<f64>] {
        &self.generators
    }

    pub fn generator(&self, j: usize) -> &DVector<f64> {
        &self.generators[j]
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    /// `sum_j coeffs_j x*_j`.
    pub fn combine(&self, coeffs: &DVector<f64>) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim);
        for (j, g) in self.generators.iter().enumerate() {
            if coeffs[j] != 0.0 {
                v.axpy(coeffs[j], g, 1.0);
            }
        }
        v
    }

    fn scale(&self, j: usize, x: &DVector<f64>) -> f64 {
        1f64.max(self.offsets[j].abs())
            .max(self.generators[j].norm() * x.norm())
    }

    /// `true` iff `<x*_j, x> <= c_j + tol` for every `j`.
    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> Result<bool> {
        check_dim(self.dim, x.len(), "state")?;
        Ok(self
            .generators
            .iter()
            .zip(&self.offsets)
            .all(|(g, c)| g.dot(x) <= c + tol))
    }

    /// First constraint violated by more than `tol * scale_j`, if any.
    pub fn first_violation(&self, x: &DVector<f64>, tol: f64) -> Result<Option<(usize, f64)>> {
        check_dim(self.dim, x.len(), "state")?;
        for j in 0..self.count() {
            let excess = self.generators[j].dot(x) - self.offsets[j];
            if excess > tol * self.scale(j, x) {
                return Ok(Some((j, excess)));
            }
        }
        Ok(None)
    }

    pub(crate) fn require_feasible(&self, x: &DVector<f64>, tol: f64) -> Result<()> {
        match self.first_violation(x, tol)? {
            Some((index, excess)) => Err(Error::Infeasible { index, excess }),
            None => Ok(()),
        }
    }

    /// Indices with `|<x*_j, x> - c_j| <= tol * max(1, |c_j|, ||x*_j|| ||x||)`.
    pub fn active_indices(&self, x: &DVector<f64>, tol: f64) -> Result<ActiveSet> {
        self.require_feasible(x, tol)?;
        let indices = (0..self.count())
            .filter(|&j| (self.generators[j].dot(x) - self.offsets[j]).abs() <= tol * self.scale(j, x))
            .collect();
        Ok(ActiveSet { indices })
    }

    /// `true` when every constraint holds strictly with margin `tol * scale_j`.
    pub fn strictly_interior(&self, x: &DVector<f64>, tol: f64) -> Result<bool> {
        check_dim(self.dim, x.len(), "state")?;
        Ok((0..self.count())
            .all(|j| self.generators[j].dot(x) - self.offsets[j] < -tol * self.scale(j, x)))
    }

    /// Positive (PLICQ) or plain (LICQ) linear independence of the active generators.
    pub fn check_cq(&self, x: &DVector<f64>, mode: CqMode, tol: f64) -> Result<CqVerdict> {
        let active = self.active_indices(x, tol)?;
        let s = self.count();
        if active.is_empty() {
            return Ok(CqVerdict {
                holds: true,
                witness: None,
                active,
            });
        }
        match mode {
            CqMode::Plicq => {
                // PLICQ fails iff 0 lies in the convex hull of the normalized
                // active generators.
                let mut set = GeneratedSet::new(self.dim);
                let units: Vec<DVector<f64>> = active
                    .indices
                    .iter()
                    .map(|&j| &self.generators[j] / self.generators[j].norm())
                    .collect();
                set.set_hull(units);
                let near = set.nearest(&DVector::zeros(self.dim))?;
                if near.distance > 1e-9 {
                    return Ok(CqVerdict {
                        holds: true,
                        witness: None,
                        active,
                    });
                }
                let mut alpha = DVector::zeros(s);
                for (k, &j) in active.indices.iter().enumerate() {
                    alpha[j] = near.weights[k] / self.generators[j].norm();
                }
                let m = alpha.amax();
                alpha /= m;
                for v in alpha.iter_mut() {
                    if *v < 1e-12 {
                        *v = 0.0;
                    }
                }
                Ok(CqVerdict {
                    holds: false,
                    witness: Some(alpha),
                    active,
                })
            }
            CqMode::Licq => {
                let cols: Vec<DVector<f64>> =
                    active.indices.iter().map(|&j| self.generators[j].clone()).collect();
                let a = DMatrix::from_columns(&cols);
                if cols.len() <= self.dim {
                    let sv = a.singular_values();
                    if sv.min() > 1e-10 * sv.max().max(1.0) {
                        return Ok(CqVerdict {
                            holds: true,
                            witness: None,
                            active,
                        });
                    }
                }
                let w = null_vector(&a);
                Ok(CqVerdict {
                    holds: false,
                    witness: Some(scatter(&active, &w, s)),
                    active,
                })
            }
        }
    }

    /// Euclidean projection of `z` onto `C` with KKT multipliers.
    pub fn project(&self, z: &DVector<f64>) -> Result<ProjectionResult> {
        check_dim(self.dim, z.len(), "projection target")?;
        let s = self.count();
        let Some((j0, excess)) = self.first_violation(z, 1e-14)? else {
            return Ok(ProjectionResult {
                point: z.clone(),
                multipliers: DVector::zeros(s),
            });
        };
        // C lies inside the violated halfspace, so a feasible projection onto
        // that halfspace is already the projection onto C.
        let g = &self.generators[j0];
        let step = excess / g.norm_squared();
        let cand = z - g * step;
        if self.first_violation(&cand, 1e-12)?.is_none() {
            let mut multipliers = DVector::zeros(s);
            multipliers[j0] = step;
            return Ok(ProjectionResult {
                point: cand,
                multipliers,
            });
        }
        let a = self.matrix();
        let c = DVector::from_column_slice(&self.offsets);
        let g = -&a;
        let h = &a * z - &c;
        let sol = ldp(&g, &h)?.ok_or(Error::EmptyPolyhedron)?;
        let mut lambda = sol.mu;
        let mut point = z + sol.x;

        // Polish: re-solve the equality system on the positive set.
        let lmax = lambda.amax();
        let pos: Vec<usize> = (0..s).filter(|&j| lambda[j] > 1e-12 * (1.0 + lmax)).collect();
        if !pos.is_empty() {
            let ap = a.select_rows(&pos);
            let m = &ap * ap.transpose();
            let rhs = &ap * z - DVector::from_iterator(pos.len(), pos.iter().map(|&j| c[j]));
            let svd = m.svd(true, true);
            let eps = 1e-14 * svd.singular_values.max().max(f64::MIN_POSITIVE);
            if let Ok(lp) = svd.solve(&rhs, eps) {
                if lp.iter().all(|&v| v >= 0.0) {
                    let cand = z - ap.tr_mul(&lp);
                    let close = (&cand - &point).norm() <= 1e-6 * (1.0 + z.norm());
                    if close && self.first_violation(&cand, 1e-12)?.is_none() {
                        point = cand;
                        lambda = DVector::zeros(s);
                        for (k, &j) in pos.iter().enumerate() {
                            lambda[j] = lp[k];
                        }
                    }
                }
            }
        }
        for j in 0..s {
            let slack = self.offsets[j] - self.generators[j].dot(&point);
            if slack > DEFAULT_TOL * self.scale(j, &point) {
                lambda[j] = 0.0;
            }
        }
        Ok(ProjectionResult {
            point,
            multipliers: lambda,
        })
    }

    /// Nonnegative `lambda` supported on the active set with `v = sum lambda_j x*_j`,
    /// found by nonnegative least squares; `None` when the residual exceeds
    /// `tol * (1 + ||v||)`. The result has one entry per generator.
    pub fn normal_cone_decompose(
        &self,
        x: &DVector<f64>,
        v: &DVector<f64>,
        tol: f64,
    ) -> Result<Option<DVector<f64>>> {
        check_dim(self.dim, v.len(), "normal vector")?;
        let active = self.active_indices(x, tol)?;
        let (lambda, res) = self.nnls_on(&active, v)?;
        if res <= tol * (1.0 + v.norm()) {
            Ok(Some(lambda))
        } else {
            Ok(None)
        }
    }

    /// NNLS fit of `v` by the generators in `active`; returns full-length
    /// coefficients and the residual norm.
    pub fn nnls_on(&self, active: &ActiveSet, v: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        let s = self.count();
        if active.is_empty() {
            return Ok((DVector::zeros(s), v.norm()));
        }
        let cols: Vec<DVector<f64>> =
            active.indices.iter().map(|&j| self.generators[j].clone()).collect();
        let e = DMatrix::from_columns(&cols);
        let sol = nnls(&e, v)?;
        Ok((scatter(active, &sol.x, s), sol.residual_norm()))
    }

    /// `(I0(y), I>(y))` relative to the active set at `xbar`.
    pub fn second_order_index_sets(
        &self,
        xbar: &DVector<f64>,
        y: &DVector<f64>,
        convention: IndexConvention,
        tol: f64,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        check_dim(self.dim, y.len(), "direction")?;
        let active = self.active_indices(xbar, tol)?;
        let mut zero = Vec::new();
        let mut pos = Vec::new();
        for &j in &active.indices {
            let threshold = match convention {
                IndexConvention::PaperLiteral => self.offsets[j],
                IndexConvention::Homogeneous => 0.0,
            };
            let val = self.generators[j].dot(y) - threshold;
            let scale = 1f64.max(threshold.abs()).max(self.generators[j].norm() * y.norm());
            if val.abs() <= tol * scale {
                zero.push(j);
            } else if val > 0.0 {
                pos.push(j);
            }
        }
        Ok((zero, pos))
    }

    /// Constraint matrix with rows `x*_j`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.count(), self.dim);
        for (j, g) in self.generators.iter().enumerate() {
            a.set_row(j, &g.transpose());
        }
        a
    }
}

fn scatter(active: &ActiveSet, vals: &DVector<f64>, s: usize) -> DVector<f64> {
    let mut out = DVector::zeros(s);
    for (k, &j) in active.indices.iter().enumerate() {
        out[j] = vals[k];
    }
    out
}

fn null_vector(a: &DMatrix<f64>) -> DVector<f64> {
    // Pad with zero rows so the SVD exposes the full right null space.
    let (n, k) = a.shape();
    let mut sq = DMatrix::zeros(k.max(n), k);
    sq.view_mut((0, 0), (n, k)).copy_from(a);
    let svd = sq.svd(false, true);
    let (imin, _) = svd.singular_values.argmin();
    svd.v_t.expect("requested v_t").row(imin).transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn quadrant() -> Polyhedron {
        Polyhedron::new(2, vec![v(&[1.0, 0.0]), v(&[0.0, 1.0])], vec![0.0, 0.0]).unwrap()
    }

    #[test]
    fn membership_examples() {
        let lit = Polyhedron::new(4, vec![v(&[1.0, 1.0, -1.0, -1.0])], vec![-12.0]).unwrap();
        assert!(lit.contains(&v(&[-30.0, -30.0, -20.0, -20.0]), DEFAULT_TOL).unwrap());
        assert!(Polyhedron::unconstrained(3).contains(&v(&[1e9, -4.0, 2.0]), 0.0).unwrap());
        let half = Polyhedron::new(1, vec![v(&[1.0])], vec![0.0]).unwrap();
        assert!(!half.contains(&v(&[1.0]), DEFAULT_TOL).unwrap());
        assert!(matches!(half.contains(&v(&[1.0, 2.0]), 0.0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn active_set_examples() {
        let q = quadrant();
        assert!(q.active_indices(&v(&[-1.0, -2.0]), DEFAULT_TOL).unwrap().is_empty());
        assert_eq!(q.active_indices(&v(&[0.0, -2.0]), DEFAULT_TOL).unwrap().indices, vec![0]);
        assert_eq!(q.active_indices(&v(&[0.0, 0.0]), DEFAULT_TOL).unwrap().indices, vec![0, 1]);
        assert!(matches!(
            q.active_indices(&v(&[1.0, 0.0]), DEFAULT_TOL),
            Err(Error::Infeasible { index: 0, .. })
        ));
    }

    #[test]
    fn constraint_qualification_examples() {
        let q = quadrant();
        let origin = v(&[0.0, 0.0]);
        assert!(q.check_cq(&origin, CqMode::Plicq, DEFAULT_TOL).unwrap().holds);
        assert!(q.check_cq(&origin, CqMode::Licq, DEFAULT_TOL).unwrap().holds);

        let slab = Polyhedron::new(2, vec![v(&[1.0, 0.0]), v(&[-1.0, 0.0])], vec![0.0, 0.0]).unwrap();
        let verdict = slab.check_cq(&origin, CqMode::Plicq, DEFAULT_TOL).unwrap();
        assert!(!verdict.holds);
        let w = verdict.witness.unwrap();
        assert_abs_diff_eq!(w[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(w[1], 1.0, epsilon = 1e-9);
        assert!(!slab.check_cq(&origin, CqMode::Licq, DEFAULT_TOL).unwrap().holds);

        // three generators in the plane at a vertex: PLICQ yes, LICQ no
        let fan = Polyhedron::new(
            2,
            vec![v(&[1.0, 0.0]), v(&[0.0, 1.0]), v(&[1.0, 1.0])],
            vec![0.0, 0.0, 0.0],
        )
        .unwrap();
        assert!(fan.check_cq(&origin, CqMode::Plicq, DEFAULT_TOL).unwrap().holds);
        let licq = fan.check_cq(&origin, CqMode::Licq, DEFAULT_TOL).unwrap();
        assert!(!licq.holds);
        let w = licq.witness.unwrap();
        assert!(fan.combine(&w).norm() < 1e-9 && w.norm() > 0.5);

        let robot = Polyhedron::new(4, vec![v(&[-1.0, -1.0, 1.0, 1.0])], vec![24.0]).unwrap();
        let contact = v(&[-40.0, -40.0, -28.0, -28.0]);
        assert!(robot.check_cq(&contact, CqMode::Plicq, DEFAULT_TOL).unwrap().holds);
        assert!(robot.check_cq(&contact, CqMode::Licq, DEFAULT_TOL).unwrap().holds);
    }

    #[test]
    fn projection_examples() {
        let q = quadrant();
        let inside = q.project(&v(&[-1.0, -3.0])).unwrap();
        assert_eq!(inside.point, v(&[-1.0, -3.0]));
        assert_eq!(inside.multipliers, v(&[0.0, 0.0]));

        let a = v(&[1.0, 2.0]);
        let half = Polyhedron::new(2, vec![a.clone()], vec![1.0]).unwrap();
        let z = v(&[3.0, 4.0]);
        let lam = (a.dot(&z) - 1.0) / a.norm_squared();
        let r = half.project(&z).unwrap();
        assert!((r.point - (&z - &a * lam)).norm() < 1e-12);
        assert_abs_diff_eq!(r.multipliers[0], lam, epsilon = 1e-12);

        let r = q.project(&v(&[1.0, 2.0])).unwrap();
        assert!(r.point.norm() < 1e-12);
        assert_abs_diff_eq!(r.multipliers[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.multipliers[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn quadrant_projection_matches_dense_grid() {
        let q = quadrant();
        let z = v(&[1.0, 2.0]);
        let step = 1e-3;
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=2000 {
            for k in 0..=2000 {
                let y = (-1.0 + i as f64 * step, -1.0 + k as f64 * step);
                if y.0 <= 0.0 && y.1 <= 0.0 {
                    let d = (z[0] - y.0).powi(2) + (z[1] - y.1).powi(2);
                    if d < best.0 {
                        best = (d, y.0, y.1);
                    }
                }
            }
        }
        let r = q.project(&z).unwrap();
        assert!((r.point[0] - best.1).abs() <= 2e-3);
        assert!((r.point[1] - best.2).abs() <= 2e-3);
    }

    #[test]
    fn empty_polyhedron_is_reported() {
        let p = Polyhedron::new(1, vec![v(&[1.0]), v(&[-1.0])], vec![-1.0, -1.0]).unwrap();
        assert_eq!(p.project(&v(&[5.0])), Err(Error::EmptyPolyhedron));
    }

    #[test]
    fn normal_cone_examples() {
        let a = v(&[1.0, 0.0]);
        let half = Polyhedron::new(2, vec![a.clone()], vec![0.0]).unwrap();
        let x = v(&[0.0, 1.0]);
        let zero = half.normal_cone_decompose(&x, &v(&[0.0, 0.0]), DEFAULT_TOL).unwrap().unwrap();
        assert_eq!(zero[0], 0.0);
        let three = half.normal_cone_decompose(&x, &(&a * 3.0), DEFAULT_TOL).unwrap().unwrap();
        assert_abs_diff_eq!(three[0], 3.0, epsilon = 1e-12);
        assert!(half.normal_cone_decompose(&x, &v(&[0.0, 1.0]), DEFAULT_TOL).unwrap().is_none());
    }

    #[test]
    fn index_set_examples() {
        let q = quadrant();
        let origin = v(&[0.0, 0.0]);
        let (i0, ip) = q
            .second_order_index_sets(&origin, &v(&[0.0, 0.5]), IndexConvention::Homogeneous, DEFAULT_TOL)
            .unwrap();
        assert_eq!((i0, ip), (vec![0], vec![1]));
        let (i0, ip) = q
            .second_order_index_sets(&origin, &v(&[0.0, 0.0]), IndexConvention::Homogeneous, DEFAULT_TOL)
            .unwrap();
        assert_eq!((i0, ip), (vec![0, 1], vec![]));

        let lit = Polyhedron::new(4, vec![v(&[1.0, 1.0, -1.0, -1.0])], vec![-12.0]).unwrap();
        let contact = v(&[-6.0, -6.0, 0.0, 0.0]);
        let r2 = 2f64.sqrt();
        let (i0, ip) = lit
            .second_order_index_sets(&contact, &v(&[-1.0, -1.0, -r2, -r2]), IndexConvention::PaperLiteral, DEFAULT_TOL)
            .unwrap();
        assert_eq!((i0, ip), (vec![], vec![0]));
    }
}
