//! Consensus ADMM over the augmented pair `Phi~ = H~ Psi~`.
//!
//! Each iteration runs three barrier-separated phases over all subsystems:
//! row updates (per-subsystem proximal steps on `Phi~`), column updates
//! (closed-form projections of `Psi~` onto the local achievability rows) and
//! the scaled dual step `Lambda += Phi~ - H~ Psi~`. Values move between
//! subsystems only as [`Message`]s checked by [`exchange`].

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::constraints::{
    build_augmented, nominal_trajectory, stacked_mask, AugRow, AugmentedPair, ConstraintSpec, LocalNorm, NoiseCase,
    NoiseModel, QuadraticCost,
};
use crate::error::{Error, Hops, Result};
use crate::model::{LocalityMasks, SystemModel};
use crate::netsim::{exchange, CommStats, Message, Phase, Topology};
use crate::qp::{pinv, solve_qp, EqLsMap, QpProblem, QpStatus, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::sls::{extract_u0, fill_shifted_columns, Layout, RowKind, SystemResponse};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmConfig {
    pub rho: f64,
    pub eps_p: f64,
    pub eps_d: f64,
    pub max_iter: usize,
    pub warm_start: bool,
    /// Worker threads; 1 runs the subsystems sequentially.
    pub workers: usize,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            eps_p: 1e-4,
            eps_d: 1e-4,
            max_iter: 5000,
            warm_start: true,
            workers: 1,
        }
    }
}

impl AdmmConfig {
    pub fn with_tolerance(mut self, eps: f64) -> Self {
        self.eps_p = eps;
        self.eps_d = eps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::Precondition(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.eps_p > 0.0 && self.eps_d > 0.0) {
            return Err(Error::Precondition("tolerances must be positive".into()));
        }
        if self.max_iter == 0 || self.workers == 0 {
            return Err(Error::Precondition("max_iter and workers must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-iteration residual history.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Telemetry {
    /// `(k, max primal residual, max dual residual)`.
    pub rows: Vec<(usize, f64, f64)>,
}

impl Telemetry {
    pub const HEADER: &'static str = "k,primal,dual";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for (k, p, d) in &self.rows {
            out.push_str(&format!("{k},{p:e},{d:e}\n"));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Column side

/// Affine parameterization `psi = T theta + t0` of one localized column of
/// the response, with the boundary rows `C theta = d` that keep the
/// disturbance from leaking outside the support.
#[derive(Debug, Clone)]
pub struct ColumnReduction {
    pub col: usize,
    pub support: Vec<usize>,
    /// Response rows of the free parameters (inputs in the support).
    pub inputs: Vec<usize>,
    pub t_mat: DMatrix<f64>,
    pub t0: DVector<f64>,
    pub c_mat: DMatrix<f64>,
    pub d_vec: DVector<f64>,
}

fn sparse_columns(m: &DMatrix<f64>) -> Vec<Vec<(usize, f64)>> {
    (0..m.ncols())
        .map(|j| (0..m.nrows()).filter(|&i| m[(i, j)] != 0.0).map(|i| (i, m[(i, j)])).collect())
        .collect()
}

/// Column-sparse copies of `A` and `B`.
#[derive(Debug, Clone)]
pub struct SparseDynamics {
    a_cols: Vec<Vec<(usize, f64)>>,
    b_cols: Vec<Vec<(usize, f64)>>,
}

impl SparseDynamics {
    pub fn new(model: &SystemModel) -> Self {
        Self {
            a_cols: sparse_columns(model.a()),
            b_cols: sparse_columns(model.b()),
        }
    }
}

/// Forward recursion of the achievability rows of column `c` restricted to
/// the rows allowed by `stacked`.
pub fn reduce_column(layout: &Layout, dynamics: &SparseDynamics, stacked: &DMatrix<bool>, c: usize) -> Result<ColumnReduction> {
    let (n, p, horizon) = (layout.n, layout.p, layout.horizon);
    let s = layout.col_time(c);
    let kc = c % n;
    let support: Vec<usize> = (0..layout.rows()).filter(|&r| stacked[(r, c)]).collect();
    let mut pos = vec![usize::MAX; layout.rows()];
    for (i, &r) in support.iter().enumerate() {
        pos[r] = i;
    }
    let inputs: Vec<usize> = support.iter().copied().filter(|&r| r >= layout.x_rows()).collect();
    let nth = inputs.len();
    let mut theta_of = vec![usize::MAX; layout.rows()];
    for (i, &r) in inputs.iter().enumerate() {
        theta_of[r] = i;
    }
    if pos[layout.x_row(s, kc)] == usize::MAX {
        return Err(Error::NotLocalizable(format!("column {c} cannot reach its own state")));
    }

    let mut t_mat = DMatrix::zeros(support.len(), nth);
    let mut t0 = DVector::zeros(support.len());
    let mut c_rows: Vec<DVector<f64>> = Vec::new();

    // Expression (theta coefficients, constant) of each state at time t.
    let mut cur: Vec<Option<DVector<f64>>> = vec![None; n];
    let mut unit = DVector::zeros(nth + 1);
    unit[nth] = 1.0;
    cur[kc] = Some(unit);
    for k in 0..n {
        let r = layout.x_row(s, k);
        if pos[r] != usize::MAX {
            if let Some(e) = &cur[k] {
                t_mat.row_mut(pos[r]).copy_from(&e.rows(0, nth).transpose());
                t0[pos[r]] = e[nth];
            }
        }
    }
    for t in s..horizon {
        let mut next: Vec<Option<DVector<f64>>> = vec![None; n];
        for (j, e) in cur.iter().enumerate() {
            let Some(e) = e else { continue };
            for &(k, a) in &dynamics.a_cols[j] {
                next[k].get_or_insert_with(|| DVector::zeros(nth + 1)).axpy(a, e, 1.0);
            }
        }
        for j in 0..p {
            let th = theta_of[layout.u_row(t, j)];
            if th == usize::MAX {
                continue;
            }
            for &(k, b) in &dynamics.b_cols[j] {
                next[k].get_or_insert_with(|| DVector::zeros(nth + 1))[th] += b;
            }
        }
        for (k, slot) in next.iter_mut().enumerate() {
            let Some(e) = slot else { continue };
            let r = layout.x_row(t + 1, k);
            if pos[r] != usize::MAX {
                t_mat.row_mut(pos[r]).copy_from(&e.rows(0, nth).transpose());
                t0[pos[r]] = e[nth];
            } else {
                if e.iter().any(|&v| v != 0.0) {
                    c_rows.push(e.clone());
                }
                *slot = None;
            }
        }
        cur = next;
    }
    for (i, &r) in inputs.iter().enumerate() {
        t_mat[(pos[r], i)] = 1.0;
    }
    let mut c_mat = DMatrix::zeros(c_rows.len(), nth);
    let mut d_vec = DVector::zeros(c_rows.len());
    for (i, e) in c_rows.iter().enumerate() {
        c_mat.row_mut(i).copy_from(&e.rows(0, nth).transpose());
        d_vec[i] = -e[nth];
    }
    Ok(ColumnReduction {
        col: c,
        support,
        inputs,
        t_mat,
        t0,
        c_mat,
        d_vec,
    })
}

impl ColumnReduction {
    /// Least-squares residual `min ||C theta - d||`.
    pub fn boundary_residual(&self) -> f64 {
        if self.c_mat.nrows() == 0 {
            return 0.0;
        }
        let theta = pinv(&self.c_mat) * &self.d_vec;
        (&self.c_mat * theta - &self.d_vec).norm()
    }
}

/// Closed-form column update for one column: `theta = K v + theta0`,
/// `H~ psi = MT theta + Mt0`.
#[derive(Debug, Clone)]
pub struct ColumnMap {
    pub col: usize,
    /// Positions of this column's entries inside the owning column slice.
    pub range: Range<usize>,
    pub reduction: ColumnReduction,
    kz: DMatrix<f64>,
    theta0: DVector<f64>,
    mt: DMatrix<f64>,
    mt0: DVector<f64>,
}

impl ColumnMap {
    fn new(red: ColumnReduction, range: Range<usize>, m: DMatrix<f64>) -> Result<Self> {
        let mt = &m * &red.t_mat;
        let mt0 = &m * &red.t0;
        let map = EqLsMap::new(&mt, &red.c_mat, &red.d_vec)?;
        let scale = red.d_vec.amax();
        if !map.is_consistent(scale) {
            return Err(Error::NotLocalizable(format!(
                "column {} has inconsistent achievability rows (residual {:.3e})",
                red.col, map.consistency
            )));
        }
        let theta0 = &map.z_offset - &map.z_gain * &mt0;
        Ok(Self {
            col: red.col,
            range,
            kz: map.z_gain,
            theta0,
            mt,
            mt0,
            reduction: red,
        })
    }

    pub fn theta(&self, v: &[f64]) -> DVector<f64> {
        &self.kz * DVector::from_column_slice(v) + &self.theta0
    }

    pub fn psi(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.reduction.t_mat * theta + &self.reduction.t0
    }
}

/// Columns owned by one subsystem.
#[derive(Debug, Clone)]
pub struct ColSlice {
    pub subsystem: usize,
    pub entries: Vec<usize>,
    pub columns: Vec<ColumnMap>,
}

#[derive(Debug, Clone)]
pub struct ColOutput {
    pub hpsi: Vec<f64>,
    pub theta: Vec<DVector<f64>>,
}

/// `Psi~` columns minimizing `||H~ Psi~ - (Phi~ + Lambda)||` subject to the
/// local achievability rows; returns `H~ Psi~` on the slice entries.
pub fn col_update(slice: &ColSlice, phi: &[f64], lambda: &[f64]) -> ColOutput {
    let mut hpsi = vec![0.0; slice.entries.len()];
    let mut theta = Vec::with_capacity(slice.columns.len());
    let mut v = Vec::new();
    for col in &slice.columns {
        v.clear();
        v.extend(col.range.clone().map(|e| phi[e] + lambda[e]));
        let th = col.theta(&v);
        let h = &col.mt * &th + &col.mt0;
        hpsi[col.range.clone()].copy_from_slice(h.as_slice());
        theta.push(th);
    }
    ColOutput { hpsi, theta }
}

// ---------------------------------------------------------------------------
// Row side

#[derive(Debug, Clone)]
struct NominalRow {
    row: usize,
    range: Range<usize>,
}

#[derive(Debug, Clone, Copy)]
struct BoxCoord {
    lo: f64,
    hi: f64,
    up_row: usize,
    up_coef: f64,
    lo_row: usize,
    lo_coef: f64,
}

#[derive(Debug, Clone)]
struct BlockPlan {
    /// Positions within the row's disturbance part.
    pos: Vec<usize>,
    g_mat: DMatrix<f64>,
    g_vec: DVector<f64>,
    boxed: Option<Vec<BoxCoord>>,
}

#[derive(Debug, Clone)]
struct OmegaRow {
    h_row: usize,
    range: Range<usize>,
    n_x0: usize,
    bound: f64,
    /// Disturbance groups as ranges within the disturbance part.
    groups: Vec<Range<usize>>,
    blocks: Vec<BlockPlan>,
    n_xi: usize,
}

#[derive(Debug, Clone)]
enum RowNoise {
    None,
    Local { norm: LocalNorm, sigma: f64 },
    Polytope,
}

/// Rows of the augmented variable owned by one subsystem.
#[derive(Debug, Clone)]
pub struct RowSlice {
    pub subsystem: usize,
    pub entries: Vec<usize>,
    /// Initial-state components this slice reads.
    pub patch: Vec<usize>,
    entry_patch: Vec<usize>,
    nominal: Vec<NominalRow>,
    weights: DMatrix<f64>,
    ineqs: Vec<(Vec<(usize, f64)>, f64)>,
    omega: Vec<OmegaRow>,
    noise: RowNoise,
}

#[derive(Debug, Clone)]
pub struct RowOutput {
    pub phi: Vec<f64>,
    /// Polytope multipliers of the owned constraint rows, row by row.
    pub xi: Vec<f64>,
}

impl RowSlice {
    pub fn gather_x0(&self, x0: &DVector<f64>) -> Vec<f64> {
        self.patch.iter().map(|&k| x0[k]).collect()
    }

    pub fn n_xi(&self) -> usize {
        self.omega.iter().map(|o| o.n_xi).sum()
    }

    /// Constraint rows owned by this slice, in output order.
    pub fn omega_rows(&self) -> Vec<usize> {
        self.omega.iter().map(|o| o.h_row).collect()
    }
}

/// Smallest `mu >= 0` with `c0 - mu*aa + sum_t w_t max(n_t - mu w_t, 0) <= h`.
fn threshold_multiplier(c0: f64, aa: f64, terms: &[(f64, f64)], h: f64) -> Option<f64> {
    let mut active: Vec<(f64, f64)> = terms.iter().copied().filter(|&(n, w)| n > 0.0 && w > 0.0).collect();
    let mut phi = c0 + active.iter().map(|&(n, w)| n * w).sum::<f64>();
    if phi <= h {
        return Some(0.0);
    }
    active.sort_by(|x, y| (x.0 / x.1).total_cmp(&(y.0 / y.1)));
    let mut slope = aa + active.iter().map(|&(_, w)| w * w).sum::<f64>();
    let mut mu = 0.0;
    for &(n, w) in &active {
        let bp = n / w;
        let next = phi - slope * (bp - mu);
        if next <= h && slope > 0.0 {
            return Some(mu + (phi - h) / slope);
        }
        mu = bp;
        phi = next;
        slope = (slope - w * w).max(aa);
    }
    if aa > 0.0 {
        Some(mu + (phi - h) / aa)
    } else {
        None
    }
}

fn infeasible(slice: &RowSlice) -> Error {
    Error::LocalInfeasible {
        subsystem: slice.subsystem,
    }
}

fn solve_small_qp(slice: &RowSlice, qp: &QpProblem) -> Result<DVector<f64>> {
    let sol = solve_qp(qp, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    match sol.status {
        QpStatus::Optimal => Ok(sol.z),
        QpStatus::Infeasible => Err(infeasible(slice)),
        s => Err(Error::Solver(format!("row update of subsystem {}: {s:?}", slice.subsystem))),
    }
}

fn nominal_update(slice: &RowSlice, x0: &[f64], v: &[f64], rho: f64, out: &mut [f64]) -> Result<()> {
    let nr = slice.nominal.len();
    if nr == 0 {
        return Ok(());
    }
    let mut aa = vec![0.0; nr];
    let mut b = vec![0.0; nr];
    for (q, row) in slice.nominal.iter().enumerate() {
        for e in row.range.clone() {
            let a = x0[slice.entry_patch[e]];
            aa[q] += a * a;
            b[q] += a * v[e];
        }
    }
    let amax = aa.iter().fold(1.0f64, |m, &x| m.max(x));
    let free: Vec<usize> = (0..nr).filter(|&q| aa[q] > 1e-18 * amax).collect();
    let mut y: Vec<f64> = b.clone();
    if !free.is_empty() {
        let nf = free.len();
        let mut qm = DMatrix::zeros(nf, nf);
        let mut c = DVector::zeros(nf);
        for (i, &qi) in free.iter().enumerate() {
            for (j, &qj) in free.iter().enumerate() {
                qm[(i, j)] = 2.0 * slice.weights[(qi, qj)];
            }
            qm[(i, i)] += rho / aa[qi];
            c[i] = -rho * b[qi] / aa[qi];
            for q in 0..nr {
                if !free.contains(&q) {
                    c[i] += 2.0 * slice.weights[(qi, q)] * y[q];
                }
            }
        }
        let mut f_rows: Vec<(DVector<f64>, f64)> = Vec::new();
        let mut slot = vec![usize::MAX; nr];
        for (i, &q) in free.iter().enumerate() {
            slot[q] = i;
        }
        for (coefs, h) in &slice.ineqs {
            let mut row = DVector::zeros(nf);
            let mut rhs = *h;
            for &(q, w) in coefs {
                if slot[q] != usize::MAX {
                    row[slot[q]] += w;
                } else {
                    rhs -= w * y[q];
                }
            }
            if row.iter().all(|&x| x == 0.0) {
                if rhs < -1e-9 * (1.0 + h.abs()) {
                    return Err(infeasible(slice));
                }
                continue;
            }
            f_rows.push((row, rhs));
        }
        let sol = if f_rows.is_empty() {
            match qm.clone().cholesky() {
                Some(ch) => ch.solve(&(-&c)),
                None => solve_small_qp(slice, &QpProblem::new(qm, c))?,
            }
        } else {
            let f_mat = DMatrix::from_fn(f_rows.len(), nf, |i, j| f_rows[i].0[j]);
            let f_vec = DVector::from_iterator(f_rows.len(), f_rows.iter().map(|r| r.1));
            solve_small_qp(slice, &QpProblem::new(qm, c).with_ineq(f_mat, f_vec))?
        };
        for (i, &q) in free.iter().enumerate() {
            y[q] = sol[i];
        }
    } else {
        for (coefs, h) in &slice.ineqs {
            let lhs: f64 = coefs.iter().map(|&(q, w)| w * y[q]).sum();
            if lhs > h + 1e-9 * (1.0 + h.abs()) {
                return Err(infeasible(slice));
            }
        }
    }
    for (q, row) in slice.nominal.iter().enumerate() {
        let free_row = aa[q] > 1e-18 * amax;
        for e in row.range.clone() {
            out[e] = if free_row {
                v[e] + (y[q] - b[q]) * x0[slice.entry_patch[e]] / aa[q]
            } else {
                v[e]
            };
        }
    }
    Ok(())
}

/// Projection of `v` onto `{w : a.w1 + sigma sum_g ||w2_g||_* <= h}`.
fn project_local(slice: &RowSlice, row: &OmegaRow, a: &[f64], v: &[f64], norm: LocalNorm, sigma: f64, out: &mut [f64]) -> Result<()> {
    let (v1, v2) = v.split_at(row.n_x0);
    let c0: f64 = a.iter().zip(v1).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let (o1, o2) = out.split_at_mut(row.n_x0);
    match norm {
        LocalNorm::Inf | LocalNorm::Two => {
            let terms: Vec<(f64, f64)> = match norm {
                LocalNorm::Inf => v2.iter().map(|x| (x.abs(), sigma)).collect(),
                _ => row.groups.iter().map(|g| (v2[g.clone()].iter().map(|x| x * x).sum::<f64>().sqrt(), sigma)).collect(),
            };
            let mu = threshold_multiplier(c0, aa, &terms, row.bound).ok_or_else(|| infeasible(slice))?;
            for i in 0..row.n_x0 {
                o1[i] = v1[i] - mu * a[i];
            }
            let cut = mu * sigma;
            match norm {
                LocalNorm::Inf => {
                    for (o, &x) in o2.iter_mut().zip(v2) {
                        *o = x.signum() * (x.abs() - cut).max(0.0);
                    }
                }
                _ => {
                    for (g, &(nrm, _)) in row.groups.iter().zip(&terms) {
                        let scale = if nrm > 0.0 { (1.0 - cut / nrm).max(0.0) } else { 0.0 };
                        for i in g.clone() {
                            o2[i] = v2[i] * scale;
                        }
                    }
                }
            }
            Ok(())
        }
        LocalNorm::One => {
            // Epigraph form: [w1, w2, t], t_g >= |w2_j| for j in g.
            let (m1, m2, ng) = (row.n_x0, v2.len(), row.groups.len());
            let nz = m1 + m2 + ng;
            let mut q = DMatrix::zeros(nz, nz);
            for i in 0..m1 + m2 {
                q[(i, i)] = 1.0;
            }
            let c = DVector::from_iterator(nz, v1.iter().chain(v2).map(|x| -x).chain(std::iter::repeat_n(0.0, ng)));
            let mut f = DMatrix::zeros(1 + 2 * m2, nz);
            let mut fv = DVector::zeros(1 + 2 * m2);
            for i in 0..m1 {
                f[(0, i)] = a[i];
            }
            for g in 0..ng {
                f[(0, m1 + m2 + g)] = sigma;
            }
            fv[0] = row.bound;
            for (g, range) in row.groups.iter().enumerate() {
                for j in range.clone() {
                    f[(1 + 2 * j, m1 + j)] = 1.0;
                    f[(1 + 2 * j, m1 + m2 + g)] = -1.0;
                    f[(2 + 2 * j, m1 + j)] = -1.0;
                    f[(2 + 2 * j, m1 + m2 + g)] = -1.0;
                }
            }
            let z = solve_small_qp(slice, &QpProblem::new(q, c).with_ineq(f, fv))?;
            o1.copy_from_slice(&z.as_slice()[..m1]);
            o2.copy_from_slice(&z.as_slice()[m1..m1 + m2]);
            Ok(())
        }
    }
}

/// Projection onto `{(w1, Xi) : a.w1 + Xi.g <= h, Xi >= 0}` with the
/// disturbance part of the row equal to `Xi G`.
fn project_polytope(slice: &RowSlice, row: &OmegaRow, a: &[f64], v: &[f64], out: &mut [f64], xi: &mut [f64]) -> Result<()> {
    let (v1, v2) = v.split_at(row.n_x0);
    let (o1, o2) = out.split_at_mut(row.n_x0);
    let c0: f64 = a.iter().zip(v1).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    o2.iter_mut().for_each(|x| *x = 0.0);
    xi.iter_mut().for_each(|x| *x = 0.0);
    if row.blocks.iter().all(|b| b.boxed.is_some()) {
        let mut terms = Vec::new();
        for b in &row.blocks {
            for (j, bc) in b.boxed.as_ref().unwrap().iter().enumerate() {
                let x = v2[b.pos[j]];
                terms.push((x, bc.hi));
                terms.push((-x, -bc.lo));
            }
        }
        let mu = threshold_multiplier(c0, aa, &terms, row.bound).ok_or_else(|| infeasible(slice))?;
        for i in 0..row.n_x0 {
            o1[i] = v1[i] - mu * a[i];
        }
        let mut off = 0;
        for b in &row.blocks {
            for (j, bc) in b.boxed.as_ref().unwrap().iter().enumerate() {
                let x = v2[b.pos[j]];
                let up = (x - mu * bc.hi).max(0.0);
                let dn = (-x + mu * bc.lo).max(0.0);
                o2[b.pos[j]] = up - dn;
                xi[off + bc.up_row] = up / bc.up_coef;
                xi[off + bc.lo_row] = dn / -bc.lo_coef;
            }
            off += b.g_mat.nrows();
        }
        return Ok(());
    }
    // General blocks: QP over [w1, Xi] with the disturbance part G' Xi.
    let m1 = row.n_x0;
    let nx = row.n_xi;
    let m2 = v2.len();
    let mut gt = DMatrix::zeros(m2, nx);
    let mut gvec = DVector::zeros(nx);
    let mut off = 0;
    for b in &row.blocks {
        for r in 0..b.g_mat.nrows() {
            for (j, &p) in b.pos.iter().enumerate() {
                gt[(p, off + r)] = b.g_mat[(r, j)];
            }
            gvec[off + r] = b.g_vec[r];
        }
        off += b.g_mat.nrows();
    }
    let nz = m1 + nx;
    let mut q = DMatrix::zeros(nz, nz);
    for i in 0..m1 {
        q[(i, i)] = 1.0;
    }
    q.view_mut((m1, m1), (nx, nx)).copy_from(&(gt.transpose() * &gt));
    let v2v = DVector::from_column_slice(v2);
    let mut c = DVector::zeros(nz);
    for i in 0..m1 {
        c[i] = -v1[i];
    }
    c.rows_mut(m1, nx).copy_from(&(-(gt.transpose() * &v2v)));
    let mut f = DMatrix::zeros(1 + nx, nz);
    let mut fv = DVector::zeros(1 + nx);
    for i in 0..m1 {
        f[(0, i)] = a[i];
    }
    for r in 0..nx {
        f[(0, m1 + r)] = gvec[r];
        f[(1 + r, m1 + r)] = -1.0;
    }
    fv[0] = row.bound;
    let z = solve_small_qp(slice, &QpProblem::new(q, c).with_ineq(f, fv))?;
    o1.copy_from_slice(&z.as_slice()[..m1]);
    let xz = z.rows(m1, nx).map(|x| x.max(0.0));
    o2.copy_from_slice((&gt * &xz).as_slice());
    xi.copy_from_slice(xz.as_slice());
    Ok(())
}

/// Proximal step on the rows of one subsystem: minimizes the local cost plus
/// `rho/2 ||Phi~ - H~ Psi~ + Lambda||^2` over the local constraint set.
pub fn row_update(slice: &RowSlice, x0_patch: &[f64], hpsi: &[f64], lambda: &[f64], rho: f64) -> Result<RowOutput> {
    let ne = slice.entries.len();
    let v: Vec<f64> = hpsi.iter().zip(lambda).map(|(h, l)| h - l).collect();
    let mut phi = vec![0.0; ne];
    let mut xi = vec![0.0; slice.n_xi()];
    nominal_update(slice, x0_patch, &v, rho, &mut phi)?;
    let mut xoff = 0;
    for row in &slice.omega {
        let a: Vec<f64> = row.range.clone().take(row.n_x0).map(|e| x0_patch[slice.entry_patch[e]]).collect();
        let vr = &v[row.range.clone()];
        let out = &mut phi[row.range.clone()];
        match slice.noise {
            RowNoise::Local { norm, sigma } => project_local(slice, row, &a, vr, norm, sigma, out)?,
            RowNoise::Polytope => project_polytope(slice, row, &a, vr, out, &mut xi[xoff..xoff + row.n_xi])?,
            RowNoise::None => unreachable!("constraint rows exist only in robust cases"),
        }
        xoff += row.n_xi;
    }
    Ok(RowOutput { phi, xi })
}

/// `Lambda += Phi~ - H~ Psi~`.
pub fn dual_update(lambda: &mut [f64], phi: &[f64], hpsi: &[f64]) {
    for ((l, p), h) in lambda.iter_mut().zip(phi).zip(hpsi) {
        *l += p - h;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Convergence {
    pub converged: bool,
    pub primal: f64,
    pub dual: f64,
}

/// Primal residual `||Phi~ - H~ Psi~||` and dual residual
/// `||H~ Psi~ - H~ Psi~_prev||` on one slice.
pub fn check_convergence(phi: &[f64], hpsi: &[f64], hpsi_prev: &[f64], eps_p: f64, eps_d: f64) -> Convergence {
    let primal = phi.iter().zip(hpsi).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let dual = hpsi.iter().zip(hpsi_prev).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Convergence {
        converged: primal <= eps_p && dual <= eps_d,
        primal,
        dual,
    }
}

// ---------------------------------------------------------------------------
// Solver

#[derive(Debug, Clone)]
struct Route {
    sender: usize,
    receiver: usize,
    entries: Arc<[usize]>,
    send_idx: Vec<usize>,
    recv_idx: Vec<usize>,
}

/// Work and communication accounting of one solve.
#[derive(Debug, Clone, Default)]
pub struct SolveStats {
    pub iterations: usize,
    /// Compute seconds spent by each subsystem over the whole solve.
    pub busy: Vec<f64>,
    pub comm: CommStats,
}

impl SolveStats {
    /// Mean over subsystems of compute time per iteration per local state.
    pub fn per_iteration_per_state(&self, model: &SystemModel) -> f64 {
        let dims = model.partition().state_dims();
        let it = self.iterations.max(1) as f64;
        self.busy.iter().zip(dims).map(|(b, &n)| b / it / n.max(1) as f64).sum::<f64>() / self.busy.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct DlmpcSolution {
    pub response: SystemResponse,
    pub u0: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub telemetry: Telemetry,
    pub stats: SolveStats,
    /// Polytope multipliers (constraint rows by polytope rows).
    pub xi: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
struct RowState {
    x0: Vec<f64>,
    phi: Vec<f64>,
    hpsi: Vec<f64>,
    lambda: Vec<f64>,
    xi: Vec<f64>,
}

#[derive(Debug, Clone)]
struct ColState {
    phi: Vec<f64>,
    hpsi: Vec<f64>,
    lambda: Vec<f64>,
    theta: Vec<DVector<f64>>,
}

/// Precomputed distributed solver for one `(model, spec, cost, masks)`.
pub struct DlmpcSolver {
    model: SystemModel,
    spec: ConstraintSpec,
    cost: QuadraticCost,
    masks: LocalityMasks,
    config: AdmmConfig,
    aug: AugmentedPair,
    entry_col_owner: Vec<usize>,
    entry_radius: Vec<usize>,
    row_local: Vec<usize>,
    col_local: Vec<usize>,
    rows: Vec<RowSlice>,
    cols: Vec<ColSlice>,
    row_routes: Vec<Route>,
    col_routes: Vec<Route>,
    state_routes: Vec<Route>,
    topology: Topology,
    pool: Option<Arc<rayon::ThreadPool>>,
    warm: Option<(Vec<f64>, Vec<f64>)>,
}

fn build_routes(
    pairs: impl Iterator<Item = (usize, usize, usize, usize, usize)>,
) -> Vec<Route> {
    let mut map: BTreeMap<(usize, usize), (Vec<usize>, Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (s, r, e, si, ri) in pairs {
        let slot = map.entry((s, r)).or_default();
        slot.0.push(e);
        slot.1.push(si);
        slot.2.push(ri);
    }
    map.into_iter()
        .map(|((sender, receiver), (e, s, r))| Route {
            sender,
            receiver,
            entries: Arc::from(e),
            send_idx: s,
            recv_idx: r,
        })
        .collect()
}

impl DlmpcSolver {
    pub fn new(
        model: &SystemModel,
        spec: &ConstraintSpec,
        cost: &QuadraticCost,
        masks: &LocalityMasks,
        config: AdmmConfig,
    ) -> Result<Self> {
        config.validate()?;
        cost.validate(model)?;
        let layout = Layout::of(model, masks.horizon);
        if spec.layout() != layout {
            return Err(Error::dim("constraint spec does not match model and horizon"));
        }
        let part = model.partition();
        let ns = part.n_subsystems();
        let n = layout.n;
        let case = spec.noise.case();
        let aug = build_augmented(case, model, spec, masks)?;
        let stacked = stacked_mask(masks);
        let d = masks.d;

        let ne = aug.n_entries();
        let mut entry_row = vec![0; ne];
        for a in 0..aug.rows.len() {
            for e in aug.entries(a) {
                entry_row[e] = a;
            }
        }
        let entry_col_owner: Vec<usize> = aug.cols.iter().map(|&c| layout.col_owner(model, c)).collect();
        let radius_of_row = |r: usize| if r < layout.x_rows() { d } else { d + 1 };
        let entry_radius: Vec<usize> = entry_row
            .iter()
            .map(|&a| match aug.rows[a] {
                AugRow::Nominal(r) => radius_of_row(r),
                AugRow::Omega(k) => spec.row(k).idx.iter().map(|&r| radius_of_row(r)).max().unwrap_or(d),
            })
            .collect();

        // Row slices.
        let poly = match &spec.noise {
            NoiseModel::Polytope(p) => Some(p),
            _ => None,
        };
        let noise = match &spec.noise {
            NoiseModel::None => RowNoise::None,
            NoiseModel::LocalNormBound { norm, sigma } => RowNoise::Local {
                norm: *norm,
                sigma: *sigma,
            },
            NoiseModel::Polytope(_) => RowNoise::Polytope,
        };
        let mut row_local = vec![usize::MAX; ne];
        let mut rows = Vec::with_capacity(ns);
        for i in 0..ns {
            let mut entries = Vec::new();
            let mut nominal = Vec::new();
            let mut omega = Vec::new();
            for a in (0..aug.rows.len()).filter(|&a| aug.row_owner[a] == i) {
                let start = entries.len();
                entries.extend(aug.entries(a));
                let range = start..entries.len();
                match aug.rows[a] {
                    AugRow::Nominal(r) => nominal.push(NominalRow { row: r, range }),
                    AugRow::Omega(k) => {
                        let cols: Vec<usize> = aug.entries(a).map(|e| aug.cols[e]).collect();
                        let n_x0 = cols.iter().filter(|&&c| c < n).count();
                        let dcols: Vec<usize> = cols[n_x0..].iter().map(|&c| c - n).collect();
                        let mut groups: Vec<Range<usize>> = Vec::new();
                        let mut gstart = 0;
                        for j in 1..=dcols.len() {
                            let key = |c: usize| (c / n, part.state_owner(c % n));
                            if j == dcols.len() || key(dcols[j]) != key(dcols[j - 1]) {
                                groups.push(gstart..j);
                                gstart = j;
                            }
                        }
                        let mut blocks = Vec::new();
                        let mut n_xi = 0;
                        if let Some(p) = poly {
                            for &b in &aug.xi_blocks[k] {
                                let blk = &p.blocks[b];
                                let pos: Vec<usize> = blk
                                    .cols
                                    .iter()
                                    .map(|c| dcols.binary_search(c).expect("block column in row support"))
                                    .collect();
                                let boxed = blk.as_box().map(|bounds| {
                                    bounds
                                        .iter()
                                        .enumerate()
                                        .map(|(j, &(lo, hi))| {
                                            let up_row = blk.box_row(j, true);
                                            let lo_row = blk.box_row(j, false);
                                            BoxCoord {
                                                lo,
                                                hi,
                                                up_row,
                                                up_coef: blk.g_mat[(up_row, j)],
                                                lo_row,
                                                lo_coef: blk.g_mat[(lo_row, j)],
                                            }
                                        })
                                        .collect()
                                });
                                n_xi += blk.g_mat.nrows();
                                blocks.push(BlockPlan {
                                    pos,
                                    g_mat: blk.g_mat.clone(),
                                    g_vec: blk.g_vec.clone(),
                                    boxed,
                                });
                            }
                        }
                        omega.push(OmegaRow {
                            h_row: k,
                            range,
                            n_x0,
                            bound: spec.bound(k),
                            groups,
                            blocks,
                            n_xi,
                        });
                    }
                }
            }
            for (li, &e) in entries.iter().enumerate() {
                row_local[e] = li;
            }
            let mut patch: Vec<usize> = entries.iter().map(|&e| aug.cols[e]).filter(|&c| c < n).collect();
            patch.sort_unstable();
            patch.dedup();
            let entry_patch = entries
                .iter()
                .map(|&e| {
                    let c = aug.cols[e];
                    if c < n {
                        patch.binary_search(&c).unwrap()
                    } else {
                        usize::MAX
                    }
                })
                .collect();
            let weights = DMatrix::from_fn(nominal.len(), nominal.len(), |a, b| {
                cost.weight(&layout, nominal[a].row, nominal[b].row)
            });
            let mut ineqs = Vec::new();
            if case == NoiseCase::NoiseFree {
                for k in spec.rows_of(i) {
                    let coefs = spec
                        .row(k)
                        .iter()
                        .filter_map(|(r, w)| nominal.iter().position(|nr| nr.row == r).map(|q| (q, w)))
                        .collect();
                    ineqs.push((coefs, spec.bound(k)));
                }
            }
            rows.push(RowSlice {
                subsystem: i,
                entries,
                patch,
                entry_patch,
                nominal,
                weights,
                ineqs,
                omega,
                noise: noise.clone(),
            });
        }

        // Column slices.
        let dynamics = SparseDynamics::new(model);
        let mut col_entries: Vec<Vec<usize>> = vec![Vec::new(); layout.cols()];
        for e in 0..ne {
            col_entries[aug.cols[e]].push(e);
        }
        let active_cols: Vec<usize> = match case {
            NoiseCase::NoiseFree => (0..n).collect(),
            _ => (0..layout.cols()).collect(),
        };
        let mut col_local = vec![usize::MAX; ne];
        let mut cols = Vec::with_capacity(ns);
        for j in 0..ns {
            let mut entries = Vec::new();
            let mut maps = Vec::new();
            for &c in active_cols.iter().filter(|&&c| layout.col_owner(model, c) == j) {
                let red = reduce_column(&layout, &dynamics, &stacked, c)?;
                let mut pos = vec![usize::MAX; layout.rows()];
                for (i, &r) in red.support.iter().enumerate() {
                    pos[r] = i;
                }
                let ce = &col_entries[c];
                let mut m = DMatrix::zeros(ce.len(), red.support.len());
                for (q, &e) in ce.iter().enumerate() {
                    for (r, w) in aug.h_tilde(spec, entry_row[e]) {
                        if pos[r] != usize::MAX {
                            m[(q, pos[r])] += w;
                        }
                    }
                }
                let start = entries.len();
                entries.extend(ce.iter().copied());
                maps.push(ColumnMap::new(red, start..entries.len(), m)?);
            }
            for (li, &e) in entries.iter().enumerate() {
                col_local[e] = li;
            }
            cols.push(ColSlice {
                subsystem: j,
                entries,
                columns: maps,
            });
        }

        let row_routes = build_routes((0..ne).map(|e| (aug.row_owner[entry_row[e]], entry_col_owner[e], e, row_local[e], col_local[e])));
        let col_routes = build_routes((0..ne).map(|e| (entry_col_owner[e], aug.row_owner[entry_row[e]], e, col_local[e], row_local[e])));
        let state_routes = build_routes(
            rows.iter()
                .flat_map(|rs| rs.patch.iter().enumerate().map(move |(pi, &k)| (part.state_owner(k), rs.subsystem, k, k, pi))),
        );
        let pool = if config.workers > 1 {
            Some(Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.workers)
                    .build()
                    .map_err(|e| Error::Precondition(format!("worker pool: {e}")))?,
            ))
        } else {
            None
        };
        Ok(Self {
            model: model.clone(),
            spec: spec.clone(),
            cost: cost.clone(),
            masks: masks.clone(),
            config,
            topology: Topology::new(model.graph(), d + 1),
            aug,
            entry_col_owner,
            entry_radius,
            row_local,
            col_local,
            rows,
            cols,
            row_routes,
            col_routes,
            state_routes,
            pool,
            warm: None,
        })
    }

    pub fn config(&self) -> &AdmmConfig {
        &self.config
    }

    pub fn set_config(&mut self, config: AdmmConfig) -> Result<()> {
        config.validate()?;
        if config.workers != self.config.workers {
            self.pool = if config.workers > 1 {
                Some(Arc::new(
                    rayon::ThreadPoolBuilder::new()
                        .num_threads(config.workers)
                        .build()
                        .map_err(|e| Error::Precondition(format!("worker pool: {e}")))?,
                ))
            } else {
                None
            };
        }
        self.config = config;
        Ok(())
    }

    pub fn augmented(&self) -> &AugmentedPair {
        &self.aug
    }

    pub fn row_slices(&self) -> &[RowSlice] {
        &self.rows
    }

    pub fn col_slices(&self) -> &[ColSlice] {
        &self.cols
    }

    pub fn reset_warm_start(&mut self) {
        self.warm = None;
    }

    /// Consensus state `(H~ Psi~, Lambda)` kept from the last solve.
    pub fn warm_state(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        self.warm.clone()
    }

    pub fn set_warm_state(&mut self, warm: Option<(Vec<f64>, Vec<f64>)>) -> Result<()> {
        if let Some((h, l)) = &warm {
            let ne = self.aug.n_entries();
            if h.len() != ne || l.len() != ne {
                return Err(Error::dim("warm state does not match the augmented layout"));
            }
        }
        self.warm = warm;
        Ok(())
    }

    fn entry_hops(&self, e: usize) -> Hops {
        let a_owner = self.aug.row_owner[self.entry_row(e)];
        self.topology.hops(self.entry_col_owner[e], a_owner)
    }

    fn entry_row(&self, e: usize) -> usize {
        self.aug.row_ptr.partition_point(|&p| p <= e) - 1
    }

    /// Checks that every payload entry belongs to the sender and receiver
    /// and lies within its own locality radius.
    fn audit(&self, m: &Message) -> Result<()> {
        let n = self.aug.layout.n;
        let part = self.model.partition();
        for &e in m.entries.iter() {
            let (owner_ok, hops, limit) = match m.phase {
                Phase::StateShare => (e < n && part.state_owner(e) == m.sender, self.topology.hops(m.sender, m.receiver), self.masks.d + 1),
                Phase::RowShare | Phase::ColShare => {
                    let ro = self.aug.row_owner[self.entry_row(e)];
                    let co = self.entry_col_owner[e];
                    let ok = if m.phase == Phase::RowShare {
                        ro == m.sender && co == m.receiver
                    } else {
                        co == m.sender && ro == m.receiver
                    };
                    (ok, self.entry_hops(e), self.entry_radius[e])
                }
            };
            let within = matches!(hops, Hops::Finite(h) if h <= limit);
            if !owner_ok || !within {
                return Err(Error::Topology {
                    phase: m.phase,
                    sender: m.sender,
                    receiver: m.receiver,
                    hops,
                    limit,
                });
            }
        }
        Ok(())
    }

    fn send<'a>(&self, routes: &[Route], phase: Phase, iteration: usize, source: impl Fn(usize) -> &'a [f64]) -> Vec<Message> {
        routes
            .iter()
            .map(|r| {
                let src = source(r.sender);
                Message {
                    sender: r.sender,
                    receiver: r.receiver,
                    phase,
                    iteration,
                    entries: r.entries.clone(),
                    payload: r.send_idx.iter().map(|&i| src[i]).collect(),
                }
            })
            .collect()
    }

    fn par_map<T: Send, S: Send>(&self, states: &mut [S], f: impl Fn(usize, &mut S) -> T + Sync + Send) -> Vec<T> {
        match &self.pool {
            Some(pool) => pool.install(|| states.par_iter_mut().enumerate().map(|(i, s)| f(i, s)).collect()),
            None => states.iter_mut().enumerate().map(|(i, s)| f(i, s)).collect(),
        }
    }

    /// Runs ADMM from the measured state `x0`.
    pub fn solve(&mut self, x0: &DVector<f64>) -> Result<DlmpcSolution> {
        let layout = self.aug.layout;
        if x0.len() != layout.n {
            return Err(Error::dim("x0 does not match the model"));
        }
        let ns = self.rows.len();
        let (warm_h, warm_l) = match (&self.warm, self.config.warm_start) {
            (Some((h, l)), true) => (Some(h.clone()), Some(l.clone())),
            _ => (None, None),
        };
        let init = |ids: &[usize], src: &Option<Vec<f64>>| -> Vec<f64> {
            match src {
                Some(v) => ids.iter().map(|&e| v[e]).collect(),
                None => vec![0.0; ids.len()],
            }
        };
        let mut rs: Vec<RowState> = self
            .rows
            .iter()
            .map(|s| RowState {
                x0: vec![0.0; s.patch.len()],
                phi: vec![0.0; s.entries.len()],
                hpsi: init(&s.entries, &warm_h),
                lambda: init(&s.entries, &warm_l),
                xi: vec![0.0; s.n_xi()],
            })
            .collect();
        let mut cs: Vec<ColState> = self
            .cols
            .iter()
            .map(|s| ColState {
                phi: vec![0.0; s.entries.len()],
                hpsi: vec![0.0; s.entries.len()],
                lambda: init(&s.entries, &warm_l),
                theta: Vec::new(),
            })
            .collect();
        let mut comm = CommStats::default();
        let mut busy = vec![0.0; ns];
        let audit = |m: &Message| self.audit(m);

        // Step 1-2: measure and share the local state.
        let x0_msgs: Vec<Message> = self
            .state_routes
            .iter()
            .map(|r| Message {
                sender: r.sender,
                receiver: r.receiver,
                phase: Phase::StateShare,
                iteration: 0,
                entries: r.entries.clone(),
                payload: r.entries.iter().map(|&k| x0[k]).collect(),
            })
            .collect();
        for (m, r) in exchange(x0_msgs, &self.topology, &audit, &mut comm)?.into_iter().zip(self.sorted(&self.state_routes)) {
            for (v, &i) in m.payload.iter().zip(&r.recv_idx) {
                rs[m.receiver].x0[i] = *v;
            }
        }

        let mut telemetry = Telemetry::default();
        let rho = self.config.rho;
        let mut converged = false;
        let mut last = (f64::INFINITY, f64::INFINITY);
        let mut iterations = 0;
        for k in 0..self.config.max_iter {
            iterations = k + 1;
            // Step 3: row updates.
            let rows = &self.rows;
            let outs = self.par_map(&mut rs, |i, st| {
                let t = Instant::now();
                let out = row_update(&rows[i], &st.x0, &st.hpsi, &st.lambda, rho).map(|o| {
                    st.phi = o.phi;
                    st.xi = o.xi;
                });
                (out, t.elapsed().as_secs_f64())
            });
            for (i, (r, t)) in outs.into_iter().enumerate() {
                r?;
                busy[i] += t;
            }
            // Step 4: share rows.
            let msgs = self.send(&self.row_routes, Phase::RowShare, k, |i| rs[i].phi.as_slice());
            for (m, r) in exchange(msgs, &self.topology, &audit, &mut comm)?.into_iter().zip(self.sorted(&self.row_routes)) {
                let dst = &mut cs[m.receiver].phi;
                for (v, &i) in m.payload.iter().zip(&r.recv_idx) {
                    dst[i] = *v;
                }
            }
            // Step 5: column updates.
            let cols = &self.cols;
            let times = self.par_map(&mut cs, |j, st| {
                let t = Instant::now();
                let out = col_update(&cols[j], &st.phi, &st.lambda);
                st.hpsi = out.hpsi;
                st.theta = out.theta;
                t.elapsed().as_secs_f64()
            });
            for (j, t) in times.into_iter().enumerate() {
                busy[j] += t;
            }
            // Step 6: share columns.
            let msgs = self.send(&self.col_routes, Phase::ColShare, k, |j| cs[j].hpsi.as_slice());
            let mut fresh: Vec<Vec<f64>> = rs.iter().map(|s| s.hpsi.clone()).collect();
            for (m, r) in exchange(msgs, &self.topology, &audit, &mut comm)?.into_iter().zip(self.sorted(&self.col_routes)) {
                let dst = &mut fresh[m.receiver];
                for (v, &i) in m.payload.iter().zip(&r.recv_idx) {
                    dst[i] = *v;
                }
            }
            // Steps 7-8: dual update and local stopping test.
            let (eps_p, eps_d) = (self.config.eps_p, self.config.eps_d);
            let mut fresh_iter = fresh.into_iter();
            let mut pairs: Vec<(RowState, Vec<f64>)> = rs.drain(..).map(|s| (s, fresh_iter.next().unwrap())).collect();
            let checks = self.par_map(&mut pairs, |_, (st, h)| {
                let t = Instant::now();
                dual_update(&mut st.lambda, &st.phi, h);
                let c = check_convergence(&st.phi, h, &st.hpsi, eps_p, eps_d);
                std::mem::swap(&mut st.hpsi, h);
                (c, t.elapsed().as_secs_f64())
            });
            rs = pairs.into_iter().map(|(s, _)| s).collect();
            let col_times = self.par_map(&mut cs, |_, st| {
                let t = Instant::now();
                let (phi, hpsi) = (std::mem::take(&mut st.phi), std::mem::take(&mut st.hpsi));
                dual_update(&mut st.lambda, &phi, &hpsi);
                st.phi = phi;
                st.hpsi = hpsi;
                t.elapsed().as_secs_f64()
            });
            let mut max_p: f64 = 0.0;
            let mut max_d: f64 = 0.0;
            let mut all = true;
            for (i, (c, t)) in checks.into_iter().enumerate() {
                busy[i] += t;
                max_p = max_p.max(c.primal);
                max_d = max_d.max(c.dual);
                all &= c.converged;
            }
            for (j, t) in col_times.into_iter().enumerate() {
                busy[j] += t;
            }
            telemetry.rows.push((k, max_p, max_d));
            last = (max_p, max_d);
            if all {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NotConverged {
                iterations,
                primal: last.0,
                dual: last.1,
            });
        }

        // Keep the consensus state for the next solve.
        let ne = self.aug.n_entries();
        let mut wh = vec![0.0; ne];
        let mut wl = vec![0.0; ne];
        for (s, st) in self.rows.iter().zip(&rs) {
            for (li, &e) in s.entries.iter().enumerate() {
                wh[e] = st.hpsi[li];
                wl[e] = st.lambda[li];
            }
        }
        for (s, st) in self.rows.iter().zip(&rs) {
            for (li, &e) in s.entries.iter().enumerate() {
                self.aug.phi[e] = st.phi[li];
            }
        }
        self.aug.hpsi.clone_from(&wh);
        self.aug.lambda.clone_from(&wl);
        self.warm = Some((wh, wl));

        let response = self.extract_response(&cs)?;
        let xi = self.assemble_xi(&rs);
        let u0 = extract_u0(&response, x0);
        let objective = self.cost.evaluate(&layout, &nominal_trajectory(&response, x0));
        Ok(DlmpcSolution {
            response,
            u0,
            objective,
            iterations,
            telemetry,
            stats: SolveStats {
                iterations,
                busy,
                comm,
            },
            xi,
        })
    }

    /// Routes in delivery order `(receiver, sender)`.
    fn sorted<'a>(&self, routes: &'a [Route]) -> Vec<&'a Route> {
        let mut v: Vec<&Route> = routes.iter().collect();
        v.sort_by_key(|r| (r.receiver, r.sender));
        v
    }

    fn extract_response(&self, cs: &[ColState]) -> Result<SystemResponse> {
        let mut resp = SystemResponse::zeros(&self.model, &self.masks)?;
        for (slice, st) in self.cols.iter().zip(cs) {
            for (map, th) in slice.columns.iter().zip(&st.theta) {
                let psi = map.psi(th);
                for (i, &r) in map.reduction.support.iter().enumerate() {
                    resp.set(r, map.col, psi[i])?;
                }
            }
        }
        if self.aug.case == NoiseCase::NoiseFree {
            fill_shifted_columns(&mut resp)?;
        }
        Ok(resp)
    }

    fn assemble_xi(&self, rs: &[RowState]) -> Option<DMatrix<f64>> {
        let NoiseModel::Polytope(p) = &self.spec.noise else { return None };
        let offsets = p.row_offsets();
        let mut xi = DMatrix::zeros(self.spec.n_rows(), p.n_rows());
        for (slice, st) in self.rows.iter().zip(rs) {
            let mut off = 0;
            for row in &slice.omega {
                for &b in &self.aug.xi_blocks[row.h_row] {
                    let m = p.blocks[b].g_mat.nrows();
                    for r in 0..m {
                        xi[(row.h_row, offsets[b] + r)] = st.xi[off + r];
                    }
                    off += m;
                }
            }
        }
        Some(xi)
    }

    /// Number of optimization variables in each subsystem's row and column
    /// subproblems.
    pub fn subproblem_sizes(&self) -> Vec<(usize, usize)> {
        self.rows.iter().zip(&self.cols).map(|(r, c)| (r.entries.len(), c.entries.len())).collect()
    }

    #[doc(hidden)]
    pub fn local_indices(&self) -> (&[usize], &[usize]) {
        (&self.row_local, &self.col_local)
    }
}

/// One-shot distributed solve.
pub fn solve_dlmpc(
    model: &SystemModel,
    spec: &ConstraintSpec,
    cost: &QuadraticCost,
    masks: &LocalityMasks,
    x0: &DVector<f64>,
    config: AdmmConfig,
) -> Result<DlmpcSolution> {
    DlmpcSolver::new(model, spec, cost, masks, config)?.solve(x0)
}

/// Whether `{Z_AB Phi = I, Phi in L_d}` is nonempty, column by column.
pub fn check_localizability(model: &SystemModel, masks: &LocalityMasks, horizon: usize) -> bool {
    if masks.horizon != horizon {
        return false;
    }
    let layout = Layout::of(model, horizon);
    let stacked = stacked_mask(masks);
    let dynamics = SparseDynamics::new(model);
    (0..layout.cols()).all(|c| match reduce_column(&layout, &dynamics, &stacked, c) {
        Ok(red) => red.boundary_residual() <= 1e-6,
        Err(_) => false,
    })
}

/// Row kinds helper for tests and callers that need the trajectory layout.
pub fn row_is_state(layout: &Layout, r: usize) -> bool {
    matches!(layout.row_kind(r), RowKind::State { .. })
}

/// Per-step record of a receding-horizon DLMPC run.
#[derive(Debug, Clone)]
pub struct StepLog {
    pub iterations: usize,
    pub objective: f64,
    pub telemetry: Telemetry,
    pub stats: SolveStats,
}

/// Receding-horizon wrapper: one warm-started solve per call.
pub struct DlmpcController {
    pub solver: DlmpcSolver,
    pub log: Vec<StepLog>,
}

impl DlmpcController {
    pub fn new(solver: DlmpcSolver) -> Self {
        Self { solver, log: Vec::new() }
    }

    /// Telemetry of every solve, one block per step with a `step` column.
    pub fn telemetry_csv(&self) -> String {
        let mut out = String::from("step,");
        out.push_str(Telemetry::HEADER);
        out.push('\n');
        for (step, entry) in self.log.iter().enumerate() {
            for (k, p, d) in &entry.telemetry.rows {
                out.push_str(&format!("{step},{k},{p:e},{d:e}\n"));
            }
        }
        out
    }
}

impl crate::netsim::Controller for DlmpcController {
    fn control(&mut self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let sol = self.solver.solve(x)?;
        self.log.push(StepLog {
            iterations: sol.iterations,
            objective: sol.objective,
            telemetry: sol.telemetry,
            stats: sol.stats,
        });
        Ok(sol.u0)
    }
}
