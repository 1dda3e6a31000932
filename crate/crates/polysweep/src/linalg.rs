//! Small dense solvers shared by every module: Lawson-Hanson nonnegative least
//! squares, least-distance programming and inequality-constrained least squares.
//!
//! All routines are deterministic. Ties in the active-set pivot go to the lowest
//! column index.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

/// Output of [`nnls`].
#[derive(Debug, Clone)]
pub struct NnlsSolution {
    pub x: DVector<f64>,
    /// `E x - f`
    pub residual: DVector<f64>,
}

impl NnlsSolution {
    pub fn residual_norm(&self) -> f64 {
        self.residual.norm()
    }
}

fn lstsq_on(e: &DMatrix<f64>, f: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let cols: Vec<usize> = (0..passive.len()).filter(|&j| passive[j]).collect();
    let mut out = DVector::zeros(passive.len());
    if cols.is_empty() {
        return out;
    }
    let sub = e.select_columns(&cols);
    let svd = sub.svd(true, true);
    let smax = svd.singular_values.max();
    let eps = 1e-13 * smax.max(f64::MIN_POSITIVE);
    let z = svd.solve(f, eps).unwrap_or_else(|_| DVector::zeros(cols.len()));
    for (k, &j) in cols.iter().enumerate() {
        out[j] = z[k];
    }
    out
}

/// Minimizes `||E x - f||` subject to `x >= 0`.
pub fn nnls(e: &DMatrix<f64>, f: &DVector<f64>) -> Result<NnlsSolution> {
    let (m, k) = e.shape();
    check_dim(m, f.len(), "nnls right-hand side")?;
    let mut x = DVector::zeros(k);
    if k == 0 {
        return Ok(NnlsSolution {
            x,
            residual: -f.clone(),
        });
    }
    let scale = e.norm().max(1.0) * f.norm().max(1.0);
    let tol = 1e-14 * scale * (m.max(k) as f64);
    let mut passive = vec![false; k];
    let mut rejected = vec![false; k];
    let max_outer = 4 * k + 20;
    for _ in 0..max_outer {
        let w = e.tr_mul(&(f - e * &x));
        let mut pick = None;
        let mut best = tol;
        for j in 0..k {
            if !passive[j] && !rejected[j] && w[j] > best {
                best = w[j];
                pick = Some(j);
            }
        }
        let Some(t) = pick else {
            let residual = e * &x - f;
            return Ok(NnlsSolution { x, residual });
        };
        passive[t] = true;
        let mut inner = 0usize;
        loop {
            inner += 1;
            if inner > 4 * k + 20 {
                return Err(Error::Numerical("nnls inner loop did not terminate".into()));
            }
            let z = lstsq_on(e, f, &passive);
            if (0..k).all(|j| !passive[j] || z[j] > 0.0) {
                x = z;
                rejected.iter_mut().for_each(|r| *r = false);
                break;
            }
            if inner == 1 && z[t] <= 0.0 {
                // Rounding made the entering column useless; skip it until x moves.
                passive[t] = false;
                rejected[t] = true;
                break;
            }
            let mut alpha = 1.0f64;
            let mut hit = None;
            for j in 0..k {
                if passive[j] && z[j] <= 0.0 {
                    let denom = x[j] - z[j];
                    let a = if denom > 0.0 { x[j] / denom } else { 0.0 };
                    if a < alpha || hit.is_none() {
                        alpha = a.min(alpha);
                        hit = Some(j);
                    }
                }
            }
            x += (z - &x) * alpha;
            if let Some(j) = hit {
                x[j] = 0.0;
            }
            let xmax = x.amax().max(1.0);
            for j in 0..k {
                if passive[j] && x[j] <= 1e-15 * xmax {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
        }
    }
    Err(Error::Numerical("nnls exceeded its iteration budget".into()))
}

/// Solution of a least-distance program.
#[derive(Debug, Clone)]
pub struct LdpSolution {
    pub x: DVector<f64>,
    /// Nonnegative multipliers with `x = G^T mu`.
    pub mu: DVector<f64>,
}

/// Minimizes `||x||` subject to `G x >= h`. Returns `None` when infeasible.
pub fn ldp(g: &DMatrix<f64>, h: &DVector<f64>) -> Result<Option<LdpSolution>> {
    let (m, n) = g.shape();
    check_dim(m, h.len(), "ldp right-hand side")?;
    if m == 0 {
        return Ok(Some(LdpSolution {
            x: DVector::zeros(n),
            mu: DVector::zeros(0),
        }));
    }
    // Row normalization leaves the feasible set unchanged and keeps the
    // infeasibility test scale free.
    let mut row_scale = vec![1.0; m];
    let mut e = DMatrix::zeros(n + 1, m);
    for i in 0..m {
        let mut nrm = h[i] * h[i];
        for c in 0..n {
            nrm += g[(i, c)] * g[(i, c)];
        }
        let nrm = nrm.sqrt();
        let s = if nrm > 0.0 { 1.0 / nrm } else { 1.0 };
        row_scale[i] = s;
        for c in 0..n {
            e[(c, i)] = g[(i, c)] * s;
        }
        e[(n, i)] = h[i] * s;
    }
    let mut f = DVector::zeros(n + 1);
    f[n] = 1.0;
    let sol = nnls(&e, &f)?;
    let denom = -sol.residual[n];
    if denom <= 1e-14 {
        return Ok(None);
    }
    let mu = DVector::from_iterator(m, (0..m).map(|i| sol.x[i] * row_scale[i] / denom));
    let x = g.tr_mul(&mu);
    Ok(Some(LdpSolution { x, mu }))
}

/// Solution of an inequality-constrained least-squares program.
#[derive(Debug, Clone)]
pub struct LsiSolution {
    pub x: DVector<f64>,
    /// `L x - b`
    pub residual: DVector<f64>,
}

/// Minimizes `||L x - b||` subject to `G x >= h`, with a tiny Tikhonov term
/// `delta ||x||` so that rank-deficient `L` still yields a unique answer.
/// Returns `None` when the constraints are infeasible.
pub fn lsi(
    l: &DMatrix<f64>,
    b: &DVector<f64>,
    g: &DMatrix<f64>,
    h: &DVector<f64>,
) -> Result<Option<LsiSolution>> {
    let (m, k) = l.shape();
    check_dim(m, b.len(), "lsi right-hand side")?;
    check_dim(k, g.ncols(), "lsi constraint columns")?;
    check_dim(g.nrows(), h.len(), "lsi constraint rows")?;
    if k == 0 {
        if h.iter().any(|&v| v > 0.0) {
            return Ok(None);
        }
        return Ok(Some(LsiSolution {
            x: DVector::zeros(0),
            residual: -b.clone(),
        }));
    }
    let delta = 1e-7 * l.norm().max(1.0);
    let mut lt = DMatrix::zeros(m + k, k);
    lt.view_mut((0, 0), (m, k)).copy_from(l);
    for i in 0..k {
        lt[(m + i, i)] = delta;
    }
    let mut bt = DVector::zeros(m + k);
    bt.rows_mut(0, m).copy_from(b);
    let qr = lt.qr();
    let r = qr.r();
    let c = qr.q().tr_mul(&bt);
    // G R^{-1}: solve R^T Z = G^T.
    let z = r
        .transpose()
        .solve_lower_triangular(&g.transpose())
        .ok_or_else(|| Error::Numerical("singular triangular factor".into()))?;
    let gp = z.transpose();
    let rinv_c = r
        .solve_upper_triangular(&c)
        .ok_or_else(|| Error::Numerical("singular triangular factor".into()))?;
    let hp = h - g * &rinv_c;
    let Some(y) = ldp(&gp, &hp)? else {
        return Ok(None);
    };
    let x = r
        .solve_upper_triangular(&(y.x + c))
        .ok_or_else(|| Error::Numerical("singular triangular factor".into()))?;
    let residual = l * &x - b;
    Ok(Some(LsiSolution { x, residual }))
}

/// A polyhedral set described by generators:
/// `base + sum a_k B_k + sum f_k F_k + sum n_k P_k + sum mu_k V_k`
/// with `lo_k <= a_k <= hi_k`, `f` free, `n >= 0` and `mu` in the unit simplex
/// (the last sum is dropped when no hull vertices are given).
#[derive(Debug, Clone)]
pub struct GeneratedSet {
    dim: usize,
    base: DVector<f64>,
    bounded: Vec<(DVector<f64>, f64, f64)>,
    free: Vec<DVector<f64>>,
    nonneg: Vec<DVector<f64>>,
    hull: Vec<DVector<f64>>,
}

/// Nearest point of a [`GeneratedSet`] together with its coefficients.
#[derive(Debug, Clone)]
pub struct Nearest {
    pub distance: f64,
    pub point: DVector<f64>,
    pub bounded: Vec<f64>,
    pub free: Vec<f64>,
    pub nonneg: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GeneratedSet {
    pub fn new(dim: usize) -> Self {
        GeneratedSet {
            dim,
            base: DVector::zeros(dim),
            bounded: Vec::new(),
            free: Vec::new(),
            nonneg: Vec::new(),
            hull: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shift(&mut self, v: &DVector<f64>) {
        self.base += v;
    }

    pub fn add_bounded(&mut self, col: DVector<f64>, lo: f64, hi: f64) {
        self.bounded.push((col, lo, hi));
    }

    pub fn add_free(&mut self, col: DVector<f64>) {
        self.free.push(col);
    }

    pub fn add_nonneg(&mut self, col: DVector<f64>) {
        self.nonneg.push(col);
    }

    pub fn set_hull(&mut self, vertices: Vec<DVector<f64>>) {
        self.hull = vertices;
    }

    /// Euclidean projection of `target` onto the set.
    pub fn nearest(&self, target: &DVector<f64>) -> Result<Nearest> {
        check_dim(self.dim, target.len(), "generated set target")?;
        let nb = self.bounded.len();
        let nf = self.free.len();
        let nn = self.nonneg.len();
        let nh = self.hull.len();
        let k = nb + nf + nn + nh;
        let mut l = DMatrix::zeros(self.dim, k);
        let mut col = 0;
        for (c, _, _) in &self.bounded {
            l.set_column(col, c);
            col += 1;
        }
        for c in self.free.iter().chain(&self.nonneg).chain(&self.hull) {
            l.set_column(col, c);
            col += 1;
        }
        let rows = 2 * nb + nn + nh + if nh > 0 { 2 } else { 0 };
        let mut g = DMatrix::zeros(rows, k);
        let mut h = DVector::zeros(rows);
        let mut r = 0;
        for (i, (_, lo, hi)) in self.bounded.iter().enumerate() {
            g[(r, i)] = 1.0;
            h[r] = *lo;
            g[(r + 1, i)] = -1.0;
            h[r + 1] = -*hi;
            r += 2;
        }
        for i in 0..nn {
            g[(r, nb + nf + i)] = 1.0;
            r += 1;
        }
        if nh > 0 {
            let off = nb + nf + nn;
            for i in 0..nh {
                g[(r, off + i)] = 1.0;
                r += 1;
            }
            for i in 0..nh {
                g[(r, off + i)] = 1.0;
                g[(r + 1, off + i)] = -1.0;
            }
            h[r] = 1.0;
            h[r + 1] = -1.0;
        }
        let b = target - &self.base;
        let sol = lsi(&l, &b, &g, &h)?
            .ok_or_else(|| Error::Numerical("generated set has empty parameter domain".into()))?;
        let mut v = sol.x;
        // Clip the coefficients onto their exact domains; the Tikhonov term can
        // leave them a hair outside.
        for (i, (_, lo, hi)) in self.bounded.iter().enumerate() {
            v[i] = v[i].clamp(*lo, *hi);
        }
        for i in 0..nn {
            v[nb + nf + i] = v[nb + nf + i].max(0.0);
        }
        if nh > 0 {
            let off = nb + nf + nn;
            let mut s = 0.0;
            for i in 0..nh {
                v[off + i] = v[off + i].max(0.0);
                s += v[off + i];
            }
            if s > 0.0 {
                for i in 0..nh {
                    v[off + i] /= s;
                }
            } else {
                v[off] = 1.0;
            }
        }
        let point = &self.base + &l * &v;
        let distance = (target - &point).norm();
        let vs = v.as_slice();
        Ok(Nearest {
            distance,
            point,
            bounded: vs[..nb].to_vec(),
            free: vs[nb..nb + nf].to_vec(),
            nonneg: vs[nb + nf..nb + nf + nn].to_vec(),
            weights: vs[nb + nf + nn..].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn nnls_unconstrained_optimum_inside_orthant() {
        let e = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let f = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let s = nnls(&e, &f).unwrap();
        assert_abs_diff_eq!(s.x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.x[1], 2.0, epsilon = 1e-12);
        assert!(s.residual_norm() < 1e-12);
    }

    #[test]
    fn nnls_clamps_negative_direction() {
        let e = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let f = DVector::from_vec(vec![-1.0, 2.0]);
        let s = nnls(&e, &f).unwrap();
        assert_eq!(s.x[0], 0.0);
        assert_abs_diff_eq!(s.x[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.residual_norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ldp_detects_infeasible_system() {
        // x >= 1 and -x >= 0
        let g = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let h = DVector::from_vec(vec![1.0, 0.0]);
        assert!(ldp(&g, &h).unwrap().is_none());
    }

    #[test]
    fn ldp_halfspace_distance() {
        // x1 + x2 >= 2: nearest point to the origin is (1,1)
        let g = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let h = DVector::from_vec(vec![2.0]);
        let s = ldp(&g, &h).unwrap().unwrap();
        assert_abs_diff_eq!(s.x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.x[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.mu[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn lsi_box_constrained_fit() {
        let l = DMatrix::identity(2, 2);
        let b = DVector::from_vec(vec![3.0, -1.0]);
        // 0 <= x <= 1 componentwise
        let g = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let h = DVector::from_vec(vec![0.0, -1.0, 0.0, -1.0]);
        let s = lsi(&l, &b, &g, &h).unwrap().unwrap();
        assert_abs_diff_eq!(s.x[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.x[1], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn generated_set_hull_and_cone() {
        // segment from (0,0) to (2,0) plus cone of (0,1)
        let mut set = GeneratedSet::new(2);
        set.set_hull(vec![DVector::from_vec(vec![0.0, 0.0]), DVector::from_vec(vec![2.0, 0.0])]);
        set.add_nonneg(DVector::from_vec(vec![0.0, 1.0]));
        let inside = set.nearest(&DVector::from_vec(vec![1.0, 5.0])).unwrap();
        assert!(inside.distance < 1e-9);
        let below = set.nearest(&DVector::from_vec(vec![1.0, -3.0])).unwrap();
        assert_abs_diff_eq!(below.distance, 3.0, epsilon = 1e-9);
        let right = set.nearest(&DVector::from_vec(vec![5.0, -4.0])).unwrap();
        assert_abs_diff_eq!(right.distance, 5.0, epsilon = 1e-9);
    }
}
