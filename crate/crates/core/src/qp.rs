//! Small dense convex solvers.
//!
//! [`solve_qp`] is a Mehrotra predictor-corrector interior-point method for
//!
//! ```text
//!   min  1/2 z'Qz + c'z   s.t.  Ez = e,  Fz <= f
//! ```
//!
//! and [`eq_ls_closed_form`] solves `min ||Mz - v||^2 s.t. Pz = q` through the
//! pseudo-inverse of its KKT matrix. Every optimal return can be certified
//! independently with [`kkt_residuals`].

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 100;

/// Relative singular-value cutoff for pseudo-inverses.
pub const PINV_RCOND: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub e_mat: DMatrix<f64>,
    pub e_vec: DVector<f64>,
    pub f_mat: DMatrix<f64>,
    pub f_vec: DVector<f64>,
}

impl QpProblem {
    pub fn new(q: DMatrix<f64>, c: DVector<f64>) -> Self {
        let n = c.len();
        Self {
            q,
            c,
            e_mat: DMatrix::zeros(0, n),
            e_vec: DVector::zeros(0),
            f_mat: DMatrix::zeros(0, n),
            f_vec: DVector::zeros(0),
        }
    }

    pub fn with_eq(mut self, e_mat: DMatrix<f64>, e_vec: DVector<f64>) -> Self {
        self.e_mat = e_mat;
        self.e_vec = e_vec;
        self
    }

    pub fn with_ineq(mut self, f_mat: DMatrix<f64>, f_vec: DVector<f64>) -> Self {
        self.f_mat = f_mat;
        self.f_vec = f_vec;
        self
    }

    pub fn n_vars(&self) -> usize {
        self.c.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.q * z)) + self.c.dot(z)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.c.len();
        if self.q.shape() != (n, n) {
            return Err(Error::dim(format!("Q is {:?}, expected ({n}, {n})", self.q.shape())));
        }
        if self.e_mat.ncols() != n || self.e_mat.nrows() != self.e_vec.len() {
            return Err(Error::dim("equality system is not conformal"));
        }
        if self.f_mat.ncols() != n || self.f_mat.nrows() != self.f_vec.len() {
            return Err(Error::dim("inequality system is not conformal"));
        }
        let scale = 1.0 + self.q.abs().max();
        if (&self.q - self.q.transpose()).abs().max() > 1e-10 * scale {
            return Err(Error::Precondition("Q is not symmetric".into()));
        }
        // Eigenvalue floor: Q + 1e-10 I must admit a Cholesky factor.
        if n > 0 {
            let shifted = &self.q + DMatrix::identity(n, n) * (1e-10 * scale);
            if shifted.cholesky().is_none() {
                return Err(Error::Precondition("Q is not positive semidefinite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct KktSolution {
    pub z: DVector<f64>,
    /// Equality multipliers.
    pub mu: DVector<f64>,
    /// Inequality multipliers (empty for the closed form).
    pub lambda: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
}

impl KktSolution {
    pub fn into_optimal(self) -> Result<Self> {
        match self.status {
            QpStatus::Optimal => Ok(self),
            QpStatus::Infeasible => Err(Error::Infeasible("QP has no feasible point".into())),
            s => Err(Error::Solver(format!("{s:?} after {} iterations", self.iterations))),
        }
    }
}

/// Infinity-norm KKT residuals of a candidate primal-dual point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_eq: f64,
    pub primal_ineq: f64,
    pub dual_sign: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        [
            self.stationarity,
            self.primal_eq,
            self.primal_ineq,
            self.dual_sign,
            self.complementarity,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Residuals of `Qz + c + E'mu + F'lambda = 0`, `Ez = e`, `Fz <= f`,
/// `lambda >= 0` and `lambda_i (f - Fz)_i = 0`, computed from scratch.
pub fn kkt_residuals(p: &QpProblem, sol: &KktSolution) -> KktResiduals {
    let z = &sol.z;
    let mut grad = &p.q * z + &p.c;
    if p.e_mat.nrows() > 0 {
        grad += p.e_mat.transpose() * &sol.mu;
    }
    let mut primal_ineq = 0.0;
    let mut dual_sign = 0.0;
    let mut compl: f64 = 0.0;
    if p.f_mat.nrows() > 0 {
        grad += p.f_mat.transpose() * &sol.lambda;
        let slack = &p.f_vec - &p.f_mat * z;
        for (s, l) in slack.iter().zip(sol.lambda.iter()) {
            primal_ineq = f64::max(primal_ineq, -s);
            dual_sign = f64::max(dual_sign, -l);
            compl = compl.max((s * l).abs());
        }
    }
    let primal_eq = if p.e_mat.nrows() > 0 {
        inf_norm(&(&p.e_mat * z - &p.e_vec))
    } else {
        0.0
    };
    KktResiduals {
        stationarity: inf_norm(&grad),
        primal_eq,
        primal_ineq: primal_ineq.max(0.0),
        dual_sign: dual_sign.max(0.0),
        complementarity: compl,
    }
}

/// Moore-Penrose pseudo-inverse with singular values below
/// `PINV_RCOND * sigma_max` treated as zero.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.is_empty() {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cut = PINV_RCOND * smax;
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cut && s > 0.0 {
            out += (vt.row(k).transpose() / s) * u.column(k).transpose();
        }
    }
    out
}

/// Pseudo-inverse of a symmetric matrix via its eigendecomposition.
pub fn pinv_symmetric(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.is_empty() {
        return m.clone();
    }
    let eig = SymmetricEigen::new(m.clone());
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, l| a.max(l.abs()));
    let cut = PINV_RCOND * lmax;
    let n = m.nrows();
    let mut scaled = eig.eigenvectors.clone();
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        let f = if l.abs() > cut && l != 0.0 { 1.0 / l } else { 0.0 };
        scaled.column_mut(k).scale_mut(f);
    }
    let out = scaled * eig.eigenvectors.transpose();
    debug_assert_eq!(out.shape(), (n, n));
    out
}

/// Precomputed affine map `v -> (z*, mu*)` for `min ||Mz - v||^2 s.t. Pz = q`
/// with fixed `M`, `P`, `q`.
#[derive(Debug, Clone)]
pub struct EqLsMap {
    pub z_gain: DMatrix<f64>,
    pub z_offset: DVector<f64>,
    pub mu_gain: DMatrix<f64>,
    pub mu_offset: DVector<f64>,
    /// `P z_offset - q`; nonzero when the equality system is inconsistent.
    pub consistency: f64,
}

impl EqLsMap {
    pub fn new(m: &DMatrix<f64>, p: &DMatrix<f64>, q: &DVector<f64>) -> Result<Self> {
        let nz = m.ncols();
        if p.ncols() != nz || p.nrows() != q.len() {
            return Err(Error::dim("closed form: P and q do not conform with M"));
        }
        let ne = p.nrows();
        let mut kkt = DMatrix::zeros(nz + ne, nz + ne);
        kkt.view_mut((0, 0), (nz, nz)).copy_from(&(m.transpose() * m));
        kkt.view_mut((0, nz), (nz, ne)).copy_from(&p.transpose());
        kkt.view_mut((nz, 0), (ne, nz)).copy_from(p);
        let kinv = pinv_symmetric(&kkt);
        let mt = m.transpose();
        let z_gain = kinv.view((0, 0), (nz, nz)) * &mt;
        let z_offset = kinv.view((0, nz), (nz, ne)) * q;
        let mu_gain = kinv.view((nz, 0), (ne, nz)) * &mt;
        let mu_offset = kinv.view((nz, nz), (ne, ne)) * q;
        // With q in range(P) every image of the map satisfies Pz = q; the
        // check on the offset alone covers it because P z_gain = 0 then.
        let consistency = if ne > 0 {
            inf_norm(&(p * &z_offset - q)) + (p * &z_gain).abs().max()
        } else {
            0.0
        };
        Ok(Self {
            z_gain,
            z_offset,
            mu_gain,
            mu_offset,
            consistency,
        })
    }

    pub fn is_consistent(&self, scale: f64) -> bool {
        self.consistency <= 1e-9 * (1.0 + scale)
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.z_gain * v + &self.z_offset
    }
}

/// `z* = argmin ||Mz - v||^2 s.t. Pz = q` and its multiplier, from the
/// pseudo-inverse of `[[M'M, P'], [P, 0]]` applied to `[M'v; q]`.
pub fn eq_ls_closed_form(m: &DMatrix<f64>, v: &DVector<f64>, p: &DMatrix<f64>, q: &DVector<f64>) -> Result<KktSolution> {
    if m.nrows() != v.len() {
        return Err(Error::dim("closed form: v does not conform with M"));
    }
    let map = EqLsMap::new(m, p, q)?;
    let z = map.apply(v);
    let mu = &map.mu_gain * v + &map.mu_offset;
    let feas = if p.nrows() > 0 { inf_norm(&(p * &z - q)) } else { 0.0 };
    let status = if feas <= 1e-9 * (1.0 + inf_norm(q)) {
        QpStatus::Optimal
    } else {
        QpStatus::Infeasible
    };
    Ok(KktSolution {
        z,
        mu,
        lambda: DVector::zeros(0),
        status,
        iterations: 0,
    })
}

/// Row-sparse view of the inequality matrix for cheap `F' W F` products.
struct SparseRows {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    fn new(f: &DMatrix<f64>) -> Self {
        let rows = (0..f.nrows())
            .map(|i| (0..f.ncols()).filter(|&j| f[(i, j)] != 0.0).map(|j| (j, f[(i, j)])).collect())
            .collect();
        Self { rows }
    }

    fn mul(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.iter().map(|&(j, v)| v * z[j]).sum()))
    }

    fn mul_t(&self, y: &DVector<f64>, n: usize) -> DVector<f64> {
        let mut out = DVector::zeros(n);
        for (r, &yi) in self.rows.iter().zip(y.iter()) {
            if yi != 0.0 {
                for &(j, v) in r {
                    out[j] += v * yi;
                }
            }
        }
        out
    }

    fn add_weighted_gram(&self, w: &DVector<f64>, out: &mut DMatrix<f64>) {
        for (r, &wi) in self.rows.iter().zip(w.iter()) {
            for &(a, va) in r {
                for &(b, vb) in r {
                    out[(a, b)] += wi * va * vb;
                }
            }
        }
    }
}

enum Factor {
    Chol(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl Factor {
    fn solve(&self, b: &DVector<f64>) -> Option<DVector<f64>> {
        match self {
            Factor::Chol(c) => Some(c.solve(b)),
            Factor::Lu(l) => l.solve(b),
        }
    }
}

fn max_step(x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
    x.iter()
        .zip(dx.iter())
        .filter(|(_, &d)| d < 0.0)
        .map(|(&v, &d)| -v / d)
        .fold(1.0, f64::min)
}

/// Equality-only QP through the pseudo-inverse of its KKT matrix.
fn solve_equality_qp(p: &QpProblem, tol: f64) -> KktSolution {
    let n = p.n_vars();
    let ne = p.e_mat.nrows();
    let mut kkt = DMatrix::zeros(n + ne, n + ne);
    kkt.view_mut((0, 0), (n, n)).copy_from(&p.q);
    kkt.view_mut((0, n), (n, ne)).copy_from(&p.e_mat.transpose());
    kkt.view_mut((n, 0), (ne, n)).copy_from(&p.e_mat);
    let mut rhs = DVector::zeros(n + ne);
    rhs.rows_mut(0, n).copy_from(&(-&p.c));
    rhs.rows_mut(n, ne).copy_from(&p.e_vec);
    let sol = pinv_symmetric(&kkt) * rhs;
    let mut out = KktSolution {
        z: sol.rows(0, n).into_owned(),
        mu: sol.rows(n, ne).into_owned(),
        lambda: DVector::zeros(0),
        status: QpStatus::Optimal,
        iterations: 1,
    };
    let r = kkt_residuals(p, &out);
    let scale = 1.0 + inf_norm(&p.c) + inf_norm(&p.e_vec);
    if r.primal_eq > tol * scale * 10.0 {
        out.status = QpStatus::Infeasible;
    } else if r.stationarity > tol * scale * 10.0 {
        out.status = QpStatus::Unbounded;
    }
    out
}

/// Primal-dual interior-point solve. The returned status is `Optimal` only
/// if the independent KKT certificate meets `tol` (scaled by data size).
pub fn solve_qp(p: &QpProblem, tol: f64, max_iter: usize) -> Result<KktSolution> {
    p.validate()?;
    let n = p.n_vars();
    let ne = p.e_mat.nrows();
    let ni = p.f_mat.nrows();
    if ni == 0 {
        return Ok(solve_equality_qp(p, tol));
    }
    let f_sp = SparseRows::new(&p.f_mat);
    let et = p.e_mat.transpose();

    let scale_c = 1.0 + inf_norm(&p.c);
    let scale_e = 1.0 + inf_norm(&p.e_vec);
    let scale_f = 1.0 + inf_norm(&p.f_vec);
    let reg = 1e-11 * (1.0 + p.q.abs().max());

    let mut z = DVector::zeros(n);
    let mut y = DVector::zeros(ne);
    let mut s = DVector::from_iterator(ni, p.f_vec.iter().map(|&f| f.max(1.0)));
    let mut lam = DVector::from_element(ni, 1.0);

    let mut status = QpStatus::MaxIter;
    let mut iters = 0;
    for k in 0..max_iter {
        iters = k + 1;
        let mut r_d = &p.q * &z + &p.c + f_sp.mul_t(&lam, n);
        if ne > 0 {
            r_d += &et * &y;
        }
        let r_e = if ne > 0 { &p.e_mat * &z - &p.e_vec } else { DVector::zeros(0) };
        let r_i = f_sp.mul(&z) + &s - &p.f_vec;
        let mu = s.dot(&lam) / ni as f64;

        if inf_norm(&r_d) <= tol * scale_c
            && inf_norm(&r_e) <= tol * scale_e
            && inf_norm(&r_i) <= tol * scale_f
            && mu <= tol * 1e-2
        {
            status = QpStatus::Optimal;
            break;
        }
        let lam_max = inf_norm(&lam);
        if lam_max > 1e12 * scale_c && inf_norm(&r_i) > tol * scale_f {
            status = QpStatus::Infeasible;
            break;
        }
        if inf_norm(&z) > 1e14 {
            status = QpStatus::Unbounded;
            break;
        }

        let w = lam.component_div(&s);
        let mut h = p.q.clone();
        f_sp.add_weighted_gram(&w, &mut h);
        for i in 0..n {
            h[(i, i)] += reg;
        }
        let factor = if ne == 0 {
            match h.clone().cholesky() {
                Some(c) => Factor::Chol(c),
                None => Factor::Lu(h.clone().lu()),
            }
        } else {
            let mut kkt = DMatrix::zeros(n + ne, n + ne);
            kkt.view_mut((0, 0), (n, n)).copy_from(&h);
            kkt.view_mut((0, n), (n, ne)).copy_from(&et);
            kkt.view_mut((n, 0), (ne, n)).copy_from(&p.e_mat);
            for i in 0..ne {
                kkt[(n + i, n + i)] = -reg;
            }
            Factor::Lu(kkt.lu())
        };

        let solve_dir = |r_c: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
            let tmp = w.component_mul(&r_i) + r_c.component_div(&s);
            let rhs1 = -&r_d - f_sp.mul_t(&tmp, n);
            let mut rhs = DVector::zeros(n + ne);
            rhs.rows_mut(0, n).copy_from(&rhs1);
            if ne > 0 {
                rhs.rows_mut(n, ne).copy_from(&(-&r_e));
            }
            let sol = factor.solve(&rhs)?;
            let dz = sol.rows(0, n).into_owned();
            let dy = sol.rows(n, ne).into_owned();
            let fdz = f_sp.mul(&dz);
            let ds = -&r_i - &fdz;
            let dl = w.component_mul(&(&r_i + &fdz)) + r_c.component_div(&s);
            Some((dz, dy, ds, dl))
        };

        let r_c_aff = -s.component_mul(&lam);
        let Some((_, _, ds_a, dl_a)) = solve_dir(&r_c_aff) else {
            status = QpStatus::MaxIter;
            break;
        };
        let a_aff = max_step(&s, &ds_a).min(max_step(&lam, &dl_a));
        let mu_aff = (&s + &ds_a * a_aff).dot(&(&lam + &dl_a * a_aff)) / ni as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);
        let r_c = -s.component_mul(&lam) - ds_a.component_mul(&dl_a) + DVector::from_element(ni, sigma * mu);
        let Some((dz, dy, ds, dl)) = solve_dir(&r_c) else {
            status = QpStatus::MaxIter;
            break;
        };
        let alpha = (0.99 * max_step(&s, &ds).min(max_step(&lam, &dl))).min(1.0);
        z += &dz * alpha;
        if ne > 0 {
            y += &dy * alpha;
        }
        s += &ds * alpha;
        lam += &dl * alpha;
    }
    let mut sol = KktSolution {
        z,
        mu: y,
        lambda: lam,
        status,
        iterations: iters,
    };
    if sol.status == QpStatus::Optimal {
        let r = kkt_residuals(p, &sol);
        let bound = 10.0 * tol * (scale_c + scale_e + scale_f);
        if r.stationarity > bound || r.primal_eq > bound || r.primal_ineq > bound || r.complementarity > bound {
            sol.status = QpStatus::MaxIter;
        }
    }
    Ok(sol)
}
