//! Centralized reference: the whole finite-horizon problem as one sparse
//! conic program, plus brute-force checks of the robust reformulations.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use nalgebra::{DMatrix, DVector};

use crate::constraints::{
    delta_groups, nominal_trajectory, stacked_mask, xi_mask, ConstraintSpec, LocalNorm, NoiseCase, NoiseModel, Polytope,
    QuadraticCost,
};
use crate::error::{Error, Result};
use crate::model::{locality_masks, LocalityMasks, MaskKind, SparsityMask, SystemModel};
use crate::qp::{solve_qp, QpProblem, QpStatus};
use crate::sls::{extract_u0, fill_shifted_columns, Layout, SystemResponse};

pub const DEFAULT_VERTEX_CAP: u128 = 1 << 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    /// Sparse interior-point conic solver.
    Sparse,
    /// Dense primal-dual QP; small instances only, no second-order cones.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    pub backend: Backend,
    pub tol: f64,
    pub max_iter: u32,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            backend: Backend::Sparse,
            tol: 1e-10,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub response: SystemResponse,
    pub objective: f64,
    pub u0: DVector<f64>,
    pub trajectory: DVector<f64>,
    /// Polytope multipliers (constraint rows by polytope rows).
    pub xi: Option<DMatrix<f64>>,
}

/// Masks that allow every causal entry.
pub fn full_masks(model: &SystemModel, horizon: usize) -> LocalityMasks {
    let mut m = locality_masks(model, model.n_subsystems(), horizon);
    let (xr, xc) = m.phi_x.shape();
    let (ur, uc) = m.phi_u.shape();
    m.phi_x = SparsityMask::full(MaskKind::Custom, xr, xc);
    m.phi_u = SparsityMask::full(MaskKind::Custom, ur, uc);
    m
}

type Row = (Vec<(usize, f64)>, f64);

/// `A x + s = b` rows grouped by cone.
#[derive(Default)]
struct Program {
    nvar: usize,
    p_upper: Vec<(usize, usize, f64)>,
    q: Vec<f64>,
    eq: Vec<Row>,
    ineq: Vec<Row>,
    soc: Vec<Vec<Row>>,
}

impl Program {
    fn var(&mut self) -> usize {
        self.nvar += 1;
        self.q.push(0.0);
        self.nvar - 1
    }
}

struct Vars {
    /// Response entry of each variable, by variable id.
    phi: Vec<(usize, usize, usize)>,
    y0: usize,
    xi: Vec<(usize, usize, usize)>,
}

fn assemble(
    model: &SystemModel,
    spec: &ConstraintSpec,
    cost: &QuadraticCost,
    masks: &LocalityMasks,
    x0: &DVector<f64>,
) -> Result<(Program, Vars)> {
    let layout = Layout::of(model, masks.horizon);
    if spec.layout() != layout {
        return Err(Error::dim("constraint spec does not match model and horizon"));
    }
    if x0.len() != layout.n {
        return Err(Error::dim("x0 does not match the model"));
    }
    cost.validate(model)?;
    let (n, p, horizon) = (layout.n, layout.p, layout.horizon);
    let case = spec.noise.case();
    let stacked = stacked_mask(masks);
    let active = match case {
        NoiseCase::NoiseFree => n,
        _ => layout.cols(),
    };
    let mut prog = Program::default();
    let mut vars = Vars {
        phi: Vec::new(),
        y0: 0,
        xi: Vec::new(),
    };
    // Response entries, column by column.
    let mut id = vec![vec![usize::MAX; layout.rows()]; active];
    for (c, ids) in id.iter_mut().enumerate() {
        for (r, slot) in ids.iter_mut().enumerate() {
            if stacked[(r, c)] {
                *slot = prog.var();
                vars.phi.push((*slot, r, c));
            }
        }
    }
    let a_rows: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|k| (0..n).filter(|&j| model.a()[(k, j)] != 0.0).map(|j| (j, model.a()[(k, j)])).collect())
        .collect();
    let b_rows: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|k| (0..p).filter(|&j| model.b()[(k, j)] != 0.0).map(|j| (j, model.b()[(k, j)])).collect())
        .collect();
    for (c, ids) in id.iter().enumerate() {
        let s = layout.col_time(c);
        let kc = c % n;
        for t in s..=horizon {
            for k in 0..n {
                let mut terms = Vec::new();
                let own = ids[layout.x_row(t, k)];
                if own != usize::MAX {
                    terms.push((own, 1.0));
                }
                if t > s {
                    for &(j, a) in &a_rows[k] {
                        let v = ids[layout.x_row(t - 1, j)];
                        if v != usize::MAX {
                            terms.push((v, -a));
                        }
                    }
                    for &(j, b) in &b_rows[k] {
                        let v = ids[layout.u_row(t - 1, j)];
                        if v != usize::MAX {
                            terms.push((v, -b));
                        }
                    }
                }
                let rhs = if t == s && k == kc { 1.0 } else { 0.0 };
                if terms.is_empty() {
                    if rhs != 0.0 {
                        return Err(Error::NotLocalizable(format!("column {c} cannot reach its own state")));
                    }
                    continue;
                }
                prog.eq.push((terms, rhs));
            }
        }
    }
    // Nominal trajectory y = Phi{1} x0.
    vars.y0 = prog.nvar;
    for r in 0..layout.rows() {
        let y = prog.var();
        let mut terms = vec![(y, 1.0)];
        for (c, ids) in id.iter().enumerate().take(n) {
            if ids[r] != usize::MAX && x0[c] != 0.0 {
                terms.push((ids[r], -x0[c]));
            }
        }
        prog.eq.push((terms, 0.0));
    }
    for t in 0..=horizon {
        let x_block = t * n..t * n + n;
        let u_block = layout.x_rows() + t * p..layout.x_rows() + t * p + p;
        for (rows, is_input) in [(x_block, false), (u_block, true)] {
            if t == horizon && is_input {
                continue;
            }
            for a in rows.clone() {
                for b in rows.clone().filter(|&b| b >= a) {
                    let w = cost.weight(&layout, a, b);
                    if w != 0.0 {
                        prog.p_upper.push((vars.y0 + a, vars.y0 + b, 2.0 * w));
                    }
                }
            }
        }
    }

    // Disturbance part of row k of H Psi, per disturbance column.
    let delta_coef = |k: usize, c: usize| -> Vec<(usize, f64)> {
        spec.row(k)
            .iter()
            .filter_map(|(r, w)| (id[c][r] != usize::MAX).then_some((id[c][r], w)))
            .collect()
    };
    let nominal = |k: usize| -> Vec<(usize, f64)> { spec.row(k).iter().map(|(r, w)| (vars.y0 + r, w)).collect() };
    match &spec.noise {
        NoiseModel::None => {
            for k in 0..spec.n_rows() {
                prog.ineq.push((nominal(k), spec.bound(k)));
            }
        }
        NoiseModel::LocalNormBound { norm, sigma } => {
            let groups = delta_groups(model, horizon);
            for k in 0..spec.n_rows() {
                let mut main = nominal(k);
                for g in &groups {
                    let coefs: Vec<Vec<(usize, f64)>> =
                        g.iter().map(|&j| delta_coef(k, n + j)).filter(|t| !t.is_empty()).collect();
                    if coefs.is_empty() {
                        continue;
                    }
                    match norm {
                        LocalNorm::Inf => {
                            for terms in coefs {
                                let tv = prog.var();
                                main.push((tv, *sigma));
                                for sign in [1.0, -1.0] {
                                    let mut row: Vec<(usize, f64)> = terms.iter().map(|&(v, w)| (v, sign * w)).collect();
                                    row.push((tv, -1.0));
                                    prog.ineq.push((row, 0.0));
                                }
                            }
                        }
                        LocalNorm::One => {
                            let tv = prog.var();
                            main.push((tv, *sigma));
                            for terms in coefs {
                                for sign in [1.0, -1.0] {
                                    let mut row: Vec<(usize, f64)> = terms.iter().map(|&(v, w)| (v, sign * w)).collect();
                                    row.push((tv, -1.0));
                                    prog.ineq.push((row, 0.0));
                                }
                            }
                        }
                        LocalNorm::Two => {
                            let tv = prog.var();
                            main.push((tv, *sigma));
                            let mut cone = vec![(vec![(tv, -1.0)], 0.0)];
                            for terms in coefs {
                                cone.push((terms.iter().map(|&(v, w)| (v, -w)).collect(), 0.0));
                            }
                            prog.soc.push(cone);
                        }
                    }
                }
                prog.ineq.push((main, spec.bound(k)));
            }
        }
        NoiseModel::Polytope(poly) => {
            let mask = xi_mask(spec, masks)?;
            let offsets = poly.row_offsets();
            let mut block_of_row = vec![0; poly.n_rows()];
            for (b, blk) in poly.blocks.iter().enumerate() {
                for q in 0..blk.g_mat.nrows() {
                    block_of_row[offsets[b] + q] = b;
                }
            }
            for k in 0..spec.n_rows() {
                let mut main = nominal(k);
                let mut per_col: Vec<Vec<(usize, f64)>> = vec![Vec::new(); poly.dim];
                let mut covered = vec![false; poly.dim];
                for q in (0..poly.n_rows()).filter(|&q| mask.allows(k, q)) {
                    let v = prog.var();
                    vars.xi.push((v, k, q));
                    let b = block_of_row[q];
                    let blk = &poly.blocks[b];
                    main.push((v, blk.g_vec[q - offsets[b]]));
                    prog.ineq.push((vec![(v, -1.0)], 0.0));
                    for (j, &col) in blk.cols.iter().enumerate() {
                        covered[col] = true;
                        let g = blk.g_mat[(q - offsets[b], j)];
                        if g != 0.0 {
                            per_col[col].push((v, -g));
                        }
                    }
                }
                for j in 0..poly.dim {
                    let mut terms = delta_coef(k, n + j);
                    if terms.is_empty() && !covered[j] {
                        continue;
                    }
                    terms.append(&mut per_col[j]);
                    if !terms.is_empty() {
                        prog.eq.push((terms, 0.0));
                    }
                }
                prog.ineq.push((main, spec.bound(k)));
            }
        }
    }
    Ok((prog, vars))
}

fn solve_sparse(prog: &Program, opts: &OracleOptions) -> Result<Vec<f64>> {
    let nv = prog.nvar;
    let (mut pi, mut pj, mut pv) = (Vec::new(), Vec::new(), Vec::new());
    for &(i, j, v) in &prog.p_upper {
        pi.push(i);
        pj.push(j);
        pv.push(v);
    }
    let pmat = CscMatrix::new_from_triplets(nv, nv, pi, pj, pv);
    let (mut ai, mut aj, mut av, mut b) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut cones = Vec::new();
    let mut push_rows = |rows: &[Row]| {
        for (terms, rhs) in rows {
            let r = b.len();
            for &(v, w) in terms {
                ai.push(r);
                aj.push(v);
                av.push(w);
            }
            b.push(*rhs);
        }
    };
    push_rows(&prog.eq);
    cones.push(SupportedConeT::ZeroConeT(prog.eq.len()));
    push_rows(&prog.ineq);
    cones.push(SupportedConeT::NonnegativeConeT(prog.ineq.len()));
    for cone in &prog.soc {
        push_rows(cone);
        cones.push(SupportedConeT::SecondOrderConeT(cone.len()));
    }
    let m = b.len();
    let amat = CscMatrix::new_from_triplets(m, nv, ai, aj, av);
    let settings = DefaultSettings {
        verbose: false,
        max_iter: opts.max_iter,
        tol_gap_abs: opts.tol,
        tol_gap_rel: opts.tol,
        tol_feas: opts.tol,
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(&pmat, &prog.q, &amat, &b, &cones, settings)
        .map_err(|e| Error::Solver(format!("conic setup: {e:?}")))?;
    solver.solve();
    match solver.solution.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => Ok(solver.solution.x.clone()),
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            Err(Error::Infeasible("centralized problem is infeasible".into()))
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            Err(Error::Solver("centralized problem is unbounded".into()))
        }
        s => Err(Error::Solver(format!("centralized solve stopped: {s:?}"))),
    }
}

fn solve_dense(prog: &Program, opts: &OracleOptions) -> Result<Vec<f64>> {
    if !prog.soc.is_empty() {
        return Err(Error::Unsupported("dense oracle backend has no second-order cones".into()));
    }
    let nv = prog.nvar;
    let mut q = DMatrix::zeros(nv, nv);
    for &(i, j, v) in &prog.p_upper {
        q[(i, j)] += v;
        if i != j {
            q[(j, i)] += v;
        }
    }
    let dense = |rows: &[Row]| {
        let mut m = DMatrix::zeros(rows.len(), nv);
        let mut b = DVector::zeros(rows.len());
        for (r, (terms, rhs)) in rows.iter().enumerate() {
            for &(v, w) in terms {
                m[(r, v)] += w;
            }
            b[r] = *rhs;
        }
        (m, b)
    };
    let (e, ev) = dense(&prog.eq);
    let (f, fv) = dense(&prog.ineq);
    let problem = QpProblem::new(q, DVector::from_column_slice(&prog.q)).with_eq(e, ev).with_ineq(f, fv);
    let sol = solve_qp(&problem, opts.tol.max(1e-9), 200)?;
    match sol.status {
        QpStatus::Optimal => Ok(sol.z.as_slice().to_vec()),
        QpStatus::Infeasible => Err(Error::Infeasible("centralized problem is infeasible".into())),
        QpStatus::Unbounded => Err(Error::Solver("centralized problem is unbounded".into())),
        QpStatus::MaxIter => Err(Error::Solver("dense oracle hit the iteration limit".into())),
    }
}

fn check_feasible(prog: &Program, x: &[f64]) -> Result<()> {
    let eval = |terms: &[(usize, f64)]| terms.iter().map(|&(v, w)| w * x[v]).sum::<f64>();
    let scale = 1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-6 * scale;
    for (terms, rhs) in &prog.eq {
        if (eval(terms) - rhs).abs() > tol {
            return Err(Error::Solver(format!("oracle equality residual {:.3e}", (eval(terms) - rhs).abs())));
        }
    }
    for (terms, rhs) in &prog.ineq {
        if eval(terms) - rhs > tol {
            return Err(Error::Solver(format!("oracle inequality residual {:.3e}", eval(terms) - rhs)));
        }
    }
    Ok(())
}

/// Solves the full problem centrally. `masks = None` allows every causal
/// entry of the response.
pub fn solve_centralized(
    model: &SystemModel,
    spec: &ConstraintSpec,
    cost: &QuadraticCost,
    masks: Option<&LocalityMasks>,
    x0: &DVector<f64>,
    opts: &OracleOptions,
) -> Result<OracleSolution> {
    let owned;
    let masks = match masks {
        Some(m) => m,
        None => {
            owned = full_masks(model, spec.horizon());
            &owned
        }
    };
    let (prog, vars) = assemble(model, spec, cost, masks, x0)?;
    let x = match opts.backend {
        Backend::Sparse => solve_sparse(&prog, opts)?,
        Backend::Dense => solve_dense(&prog, opts)?,
    };
    check_feasible(&prog, &x)?;
    let mut response = SystemResponse::zeros(model, masks)?;
    for &(v, r, c) in &vars.phi {
        response.set(r, c, x[v])?;
    }
    if spec.noise.case() == NoiseCase::NoiseFree {
        fill_shifted_columns(&mut response)?;
    }
    let xi = match &spec.noise {
        NoiseModel::Polytope(poly) => {
            let mut m = DMatrix::zeros(spec.n_rows(), poly.n_rows());
            for &(v, k, q) in &vars.xi {
                m[(k, q)] = x[v].max(0.0);
            }
            Some(m)
        }
        _ => None,
    };
    let trajectory = nominal_trajectory(&response, x0);
    let objective = cost.evaluate(&response.layout, &trajectory);
    let u0 = extract_u0(&response, x0);
    Ok(OracleSolution {
        response,
        objective,
        u0,
        trajectory,
        xi,
    })
}

/// Finite-horizon LQR by backward Riccati recursion; returns the stacked
/// state and input trajectories from `x0`.
pub fn lqr_trajectory(model: &SystemModel, cost: &QuadraticCost, x0: &DVector<f64>, horizon: usize) -> Result<(DVector<f64>, DVector<f64>)> {
    let (a, b) = (model.a(), model.b());
    let (n, p) = (model.n_states(), model.n_inputs());
    let mut pm = cost.q.clone();
    let mut gains = vec![DMatrix::zeros(p, n); horizon];
    for t in (0..horizon).rev() {
        let btp = b.transpose() * &pm;
        let s = &cost.r + &btp * b;
        let k = -s
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Precondition("R + B'PB is not positive definite".into()))?
            .solve(&(&btp * a));
        pm = &cost.q + a.transpose() * &pm * (a + b * &k);
        pm = (&pm + pm.transpose()) * 0.5;
        gains[t] = k;
    }
    let mut x = DVector::zeros((horizon + 1) * n);
    let mut u = DVector::zeros((horizon + 1) * p);
    let mut xt = x0.clone();
    x.rows_mut(0, n).copy_from(&xt);
    for (t, k) in gains.iter().enumerate() {
        let ut = k * &xt;
        xt = a * &xt + b * &ut;
        u.rows_mut(t * p, p).copy_from(&ut);
        x.rows_mut((t + 1) * n, n).copy_from(&xt);
    }
    Ok((x, u))
}

/// Vertices of the bounded polytope `{x : G x <= g}`.
pub fn polytope_vertices(g_mat: &DMatrix<f64>, g_vec: &DVector<f64>) -> Vec<DVector<f64>> {
    let (m, d) = g_mat.shape();
    let mut out: Vec<DVector<f64>> = Vec::new();
    if d == 0 {
        return vec![DVector::zeros(0)];
    }
    let mut idx: Vec<usize> = (0..d).collect();
    if d > m {
        return out;
    }
    loop {
        let sub = DMatrix::from_fn(d, d, |i, j| g_mat[(idx[i], j)]);
        let rhs = DVector::from_fn(d, |i, _| g_vec[idx[i]]);
        if let Some(x) = sub.lu().solve(&rhs) {
            let scale = 1.0 + x.amax();
            let feasible = (g_mat * &x - g_vec).iter().all(|&r| r <= 1e-9 * scale);
            if feasible && x.iter().all(|v| v.is_finite()) && !out.iter().any(|v| (v - &x).amax() <= 1e-9 * scale) {
                out.push(x);
            }
        }
        // Next combination of d rows out of m.
        let mut i = d;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + m - d {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..d {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// `max { c.x : G x <= g }` by vertex enumeration.
pub fn polytope_support_primal(g_mat: &DMatrix<f64>, g_vec: &DVector<f64>, c: &DVector<f64>) -> Result<f64> {
    polytope_vertices(g_mat, g_vec)
        .iter()
        .map(|v| c.dot(v))
        .reduce(f64::max)
        .ok_or_else(|| Error::Infeasible("polytope has no vertices".into()))
}

/// `min { xi.g : G' xi = c, xi >= 0 }` and its minimizer.
pub fn polytope_support_dual(g_mat: &DMatrix<f64>, g_vec: &DVector<f64>, c: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    let (m, d) = g_mat.shape();
    let mut prog = Program::default();
    for _ in 0..m {
        prog.var();
    }
    prog.q.copy_from_slice(g_vec.as_slice());
    for j in 0..d {
        let terms = (0..m).filter(|&q| g_mat[(q, j)] != 0.0).map(|q| (q, g_mat[(q, j)])).collect();
        prog.eq.push((terms, c[j]));
    }
    for q in 0..m {
        prog.ineq.push((vec![(q, -1.0)], 0.0));
    }
    let x = solve_sparse(&prog, &OracleOptions::default())?;
    let xi = DVector::from_iterator(m, x.iter().map(|v| v.max(0.0)));
    Ok((xi.dot(g_vec), xi))
}

/// Vertex sets of each disturbance group, with the group's coordinates.
fn group_vertices(spec: &ConstraintSpec, model: &SystemModel) -> Result<Vec<(Vec<usize>, Vec<DVector<f64>>)>> {
    match &spec.noise {
        NoiseModel::None => Ok(Vec::new()),
        NoiseModel::LocalNormBound { norm, sigma } => delta_groups(model, spec.horizon())
            .into_iter()
            .map(|g| {
                let m = g.len();
                let verts = match norm {
                    LocalNorm::Inf => {
                        if m >= 64 {
                            return Err(Error::VertexCap {
                                count: u128::MAX,
                                cap: DEFAULT_VERTEX_CAP,
                            });
                        }
                        (0..1u64 << m)
                            .map(|bits| DVector::from_fn(m, |j, _| if bits >> j & 1 == 1 { *sigma } else { -*sigma }))
                            .collect()
                    }
                    LocalNorm::One => (0..2 * m)
                        .map(|q| {
                            let mut v = DVector::zeros(m);
                            v[q / 2] = if q % 2 == 0 { *sigma } else { -*sigma };
                            v
                        })
                        .collect(),
                    LocalNorm::Two => return Err(Error::Unsupported("the 2-norm ball has no finite vertex set".into())),
                };
                Ok((g, verts))
            })
            .collect(),
        NoiseModel::Polytope(poly) => polytope_groups(poly),
    }
}

fn polytope_groups(poly: &Polytope) -> Result<Vec<(Vec<usize>, Vec<DVector<f64>>)>> {
    let mut covered = vec![false; poly.dim];
    for blk in &poly.blocks {
        for &c in &blk.cols {
            covered[c] = true;
        }
    }
    if covered.iter().any(|&c| !c) {
        return Err(Error::Precondition("polytope leaves some disturbance coordinates unbounded".into()));
    }
    Ok(poly
        .blocks
        .iter()
        .map(|b| (b.cols.clone(), polytope_vertices(&b.g_mat, &b.g_vec)))
        .collect())
}

/// Number of vertices of the disturbance set (saturating).
pub fn vertex_count(spec: &ConstraintSpec, model: &SystemModel) -> Result<u128> {
    Ok(group_vertices(spec, model)?
        .iter()
        .fold(1u128, |acc, (_, v)| acc.saturating_mul(v.len() as u128)))
}

/// Worst-case `max_delta [H Phi [x0; delta]]_k - h_k` for every row `k`, by
/// enumerating every vertex of the disturbance set.
pub fn robust_violation_check(
    resp: &SystemResponse,
    spec: &ConstraintSpec,
    model: &SystemModel,
    x0: &DVector<f64>,
    cap: u128,
) -> Result<DVector<f64>> {
    let groups = group_vertices(spec, model)?;
    let count = groups.iter().fold(1u128, |acc, (_, v)| acc.saturating_mul(v.len() as u128));
    if count > cap {
        return Err(Error::VertexCap { count, cap });
    }
    let k_rows = spec.n_rows();
    let base = DVector::from_iterator(k_rows, (0..k_rows).map(|k| spec.h_phi_x0(resp, k, x0) - spec.bound(k)));
    let coefs: Vec<DVector<f64>> = (0..k_rows).map(|k| spec.h_phi_delta(resp, k)).collect();
    // Contribution of each vertex of each group to each row.
    let contrib: Vec<Vec<DVector<f64>>> = groups
        .iter()
        .map(|(cols, verts)| {
            verts
                .iter()
                .map(|v| {
                    DVector::from_iterator(
                        k_rows,
                        coefs.iter().map(|c| cols.iter().zip(v.iter()).map(|(&j, &x)| c[j] * x).sum::<f64>()),
                    )
                })
                .collect()
        })
        .collect();
    let mut worst = DVector::from_element(k_rows, f64::NEG_INFINITY);
    let mut digit = vec![0usize; contrib.len()];
    loop {
        let mut val = base.clone();
        for (g, &dv) in digit.iter().enumerate() {
            val += &contrib[g][dv];
        }
        for k in 0..k_rows {
            worst[k] = worst[k].max(val[k]);
        }
        let mut g = 0;
        loop {
            if g == digit.len() {
                return Ok(worst);
            }
            digit[g] += 1;
            if digit[g] < contrib[g].len() {
                break;
            }
            digit[g] = 0;
            g += 1;
        }
    }
}

/// Receding-horizon controller backed by the centralized solve.
pub struct OracleController {
    pub model: SystemModel,
    pub spec: ConstraintSpec,
    pub cost: QuadraticCost,
    pub masks: Option<LocalityMasks>,
    pub options: OracleOptions,
    pub objectives: Vec<f64>,
}

impl OracleController {
    pub fn new(model: &SystemModel, spec: &ConstraintSpec, cost: &QuadraticCost, masks: Option<&LocalityMasks>) -> Self {
        Self {
            model: model.clone(),
            spec: spec.clone(),
            cost: cost.clone(),
            masks: masks.cloned(),
            options: OracleOptions::default(),
            objectives: Vec::new(),
        }
    }
}

impl crate::netsim::Controller for OracleController {
    fn control(&mut self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let sol = solve_centralized(&self.model, &self.spec, &self.cost, self.masks.as_ref(), x, &self.options)?;
        self.objectives.push(sol.objective);
        Ok(sol.u0)
    }
}
