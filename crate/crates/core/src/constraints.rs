//! Polytopic trajectory constraints, disturbance models and their robust
//! reformulations, and the sparse layout of the augmented ADMM variables.
//!
//! Constraints act on the stacked trajectory `[x_0..x_T; u_0..u_T]`, i.e. on
//! rows of the stacked response. Every constraint row is owned by one
//! subsystem and only touches that subsystem's states and inputs.
//!
//! Disturbance coordinates are indexed `t * n + k` for `delta_t`, which is
//! column `n + t * n + k` of the response.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{LocalityMasks, MaskKind, SparsityMask, SystemModel};
use crate::sls::{Layout, RowKind, SystemResponse};
use crate::textfmt::{fmt_f64, parse_num, TextReader, TextWriter};

/// Norm of the per-patch disturbance bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalNorm {
    Inf,
    Two,
    One,
}

impl fmt::Display for LocalNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LocalNorm::Inf => "inf",
            LocalNorm::Two => "2",
            LocalNorm::One => "1",
        })
    }
}

impl FromStr for LocalNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inf" | "Inf" | "infinity" => Ok(LocalNorm::Inf),
            "2" => Ok(LocalNorm::Two),
            "1" => Ok(LocalNorm::One),
            _ => Err(Error::Unsupported(format!("local norm `{s}`"))),
        }
    }
}

impl LocalNorm {
    /// Dual norm of a slice.
    pub fn dual(&self, v: &[f64]) -> f64 {
        match self {
            LocalNorm::Inf => v.iter().map(|x| x.abs()).sum(),
            LocalNorm::Two => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            LocalNorm::One => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    pub fn primal(&self, v: &[f64]) -> f64 {
        match self {
            LocalNorm::Inf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            LocalNorm::Two => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            LocalNorm::One => v.iter().map(|x| x.abs()).sum(),
        }
    }
}

/// One diagonal block `{G_b delta[cols] <= g_b}` of a block-diagonal polytope.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyBlock {
    pub cols: Vec<usize>,
    pub g_mat: DMatrix<f64>,
    pub g_vec: DVector<f64>,
}

impl PolyBlock {
    /// Per-column `(lo, hi)` if every row bounds a single coordinate, each
    /// coordinate has exactly one upper and one lower row, and `lo <= 0 <= hi`.
    pub fn as_box(&self) -> Option<Vec<(f64, f64)>> {
        let m = self.cols.len();
        let mut lo: Vec<Option<f64>> = vec![None; m];
        let mut hi: Vec<Option<f64>> = vec![None; m];
        for r in 0..self.g_mat.nrows() {
            let nz: Vec<usize> = (0..m).filter(|&j| self.g_mat[(r, j)] != 0.0).collect();
            let [j] = nz.as_slice() else { return None };
            let a = self.g_mat[(r, *j)];
            let b = self.g_vec[r] / a;
            let slot = if a > 0.0 { &mut hi[*j] } else { &mut lo[*j] };
            if slot.replace(b).is_some() {
                return None;
            }
        }
        lo.into_iter()
            .zip(hi)
            .map(|(l, h)| match (l, h) {
                (Some(l), Some(h)) if l <= 0.0 && h >= 0.0 => Some((l, h)),
                _ => None,
            })
            .collect()
    }

    /// Row index of the upper (`true`) or lower bound row of local column `j`
    /// in a box block.
    pub fn box_row(&self, j: usize, upper: bool) -> usize {
        (0..self.g_mat.nrows())
            .find(|&r| {
                let a = self.g_mat[(r, j)];
                if upper {
                    a > 0.0
                } else {
                    a < 0.0
                }
            })
            .expect("box row")
    }
}

/// Block-diagonal polytope `{delta : G delta <= g}` over `dim` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    pub dim: usize,
    pub blocks: Vec<PolyBlock>,
}

impl Polytope {
    /// Box `lo_k <= delta_{t,k} <= hi_k` with one block per subsystem and
    /// time step.
    pub fn local_box(model: &SystemModel, horizon: usize, lo: &DVector<f64>, hi: &DVector<f64>) -> Result<Self> {
        let n = model.n_states();
        if lo.len() != n || hi.len() != n {
            return Err(Error::dim("box bounds must have one entry per state"));
        }
        let part = model.partition();
        let mut blocks = Vec::new();
        for t in 0..horizon {
            for i in 0..part.n_subsystems() {
                let range = part.state_range(i);
                let m = range.len();
                let mut g_mat = DMatrix::zeros(2 * m, m);
                let mut g_vec = DVector::zeros(2 * m);
                for (j, k) in range.clone().enumerate() {
                    g_mat[(2 * j, j)] = 1.0;
                    g_vec[2 * j] = hi[k];
                    g_mat[(2 * j + 1, j)] = -1.0;
                    g_vec[2 * j + 1] = -lo[k];
                }
                blocks.push(PolyBlock {
                    cols: range.map(|k| t * n + k).collect(),
                    g_mat,
                    g_vec,
                });
            }
        }
        Ok(Self { dim: horizon * n, blocks })
    }

    pub fn n_rows(&self) -> usize {
        self.blocks.iter().map(|b| b.g_mat.nrows()).sum()
    }

    /// First global row of each block.
    pub fn row_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut acc = 0;
        for b in &self.blocks {
            out.push(acc);
            acc += b.g_mat.nrows();
        }
        out
    }

    pub fn dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let m = self.n_rows();
        let mut g = DMatrix::zeros(m, self.dim);
        let mut gv = DVector::zeros(m);
        let mut r0 = 0;
        for b in &self.blocks {
            for r in 0..b.g_mat.nrows() {
                for (j, &c) in b.cols.iter().enumerate() {
                    g[(r0 + r, c)] = b.g_mat[(r, j)];
                }
                gv[r0 + r] = b.g_vec[r];
            }
            r0 += b.g_mat.nrows();
        }
        (g, gv)
    }

    pub fn contains(&self, delta: &DVector<f64>, tol: f64) -> bool {
        self.blocks.iter().all(|b| {
            let local = DVector::from_iterator(b.cols.len(), b.cols.iter().map(|&c| delta[c]));
            (&b.g_mat * local - &b.g_vec).iter().all(|&v| v <= tol)
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.dim];
        for b in &self.blocks {
            if b.g_mat.ncols() != b.cols.len() || b.g_mat.nrows() != b.g_vec.len() {
                return Err(Error::dim("polytope block is not conformal"));
            }
            for &c in &b.cols {
                if c >= self.dim || std::mem::replace(&mut seen[c], true) {
                    return Err(Error::Precondition(format!("polytope column {c} is out of range or shared by two blocks")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    None,
    LocalNormBound { norm: LocalNorm, sigma: f64 },
    Polytope(Polytope),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseCase {
    NoiseFree,
    LocalBound,
    Polytopic,
}

impl NoiseCase {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseCase::NoiseFree => "none",
            NoiseCase::LocalBound => "local_bound",
            NoiseCase::Polytopic => "polytope",
        }
    }
}

impl NoiseModel {
    pub fn case(&self) -> NoiseCase {
        match self {
            NoiseModel::None => NoiseCase::NoiseFree,
            NoiseModel::LocalNormBound { .. } => NoiseCase::LocalBound,
            NoiseModel::Polytope(_) => NoiseCase::Polytopic,
        }
    }
}

fn expect_case(spec: &ConstraintSpec, expected: NoiseCase) -> Result<()> {
    let found = spec.noise.case();
    if found != expected {
        return Err(Error::NoiseCase {
            expected: expected.name(),
            found: found.name(),
        });
    }
    Ok(())
}

/// Sparse row of `H` over the stacked trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
}

impl SparseRow {
    pub fn new(entries: impl IntoIterator<Item = (usize, f64)>) -> Self {
        let mut e: Vec<(usize, f64)> = entries.into_iter().filter(|&(_, v)| v != 0.0).collect();
        e.sort_by_key(|&(i, _)| i);
        Self {
            idx: e.iter().map(|&(i, _)| i).collect(),
            val: e.iter().map(|&(_, v)| v).collect(),
        }
    }

    pub fn dot(&self, v: &DVector<f64>) -> f64 {
        self.idx.iter().zip(&self.val).map(|(&i, &a)| a * v[i]).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.idx.iter().copied().zip(self.val.iter().copied())
    }
}

/// Symmetric per-state and per-input bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub x_lo: DVector<f64>,
    pub x_hi: DVector<f64>,
    pub u_lo: DVector<f64>,
    pub u_hi: DVector<f64>,
}

impl BoxBounds {
    pub fn symmetric(x_max: DVector<f64>, u_max: DVector<f64>) -> Self {
        Self {
            x_lo: -&x_max,
            x_hi: x_max,
            u_lo: -&u_max,
            u_hi: u_max,
        }
    }
}

/// `H [x; u] <= h` plus the disturbance model. Constrains `x_1..x_T` and
/// `u_0..u_{T-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec {
    layout: Layout,
    rows: Vec<SparseRow>,
    h: Vec<f64>,
    owner: Vec<usize>,
    pub noise: NoiseModel,
}

const SPEC_MAGIC: &str = "dlmpc-constraints v1";

impl ConstraintSpec {
    pub fn new(
        model: &SystemModel,
        horizon: usize,
        rows: Vec<SparseRow>,
        h: Vec<f64>,
        owner: Vec<usize>,
        noise: NoiseModel,
    ) -> Result<Self> {
        let layout = Layout::of(model, horizon);
        if rows.len() != h.len() || rows.len() != owner.len() {
            return Err(Error::dim("H, h and row owners differ in length"));
        }
        for (k, (row, &o)) in rows.iter().zip(&owner).enumerate() {
            if o >= model.n_subsystems() {
                return Err(Error::dim(format!("row {k} owned by unknown subsystem {o}")));
            }
            for &c in &row.idx {
                if c >= layout.rows() {
                    return Err(Error::dim(format!("row {k} references trajectory entry {c}")));
                }
                if layout.row_owner(model, c) != o {
                    return Err(Error::Precondition(format!(
                        "row {k} of subsystem {o} touches an entry of subsystem {}",
                        layout.row_owner(model, c)
                    )));
                }
            }
        }
        match &noise {
            NoiseModel::None => {}
            NoiseModel::LocalNormBound { sigma, .. } => {
                if !(sigma.is_finite() && *sigma >= 0.0) {
                    return Err(Error::Precondition(format!("sigma must be finite and nonnegative, got {sigma}")));
                }
            }
            NoiseModel::Polytope(p) => {
                if p.dim != horizon * layout.n {
                    return Err(Error::dim(format!("polytope has dimension {}, expected {}", p.dim, horizon * layout.n)));
                }
                p.validate()?;
                let part = model.partition();
                for b in &p.blocks {
                    let owners: Vec<usize> = b.cols.iter().map(|&c| part.state_owner(c % layout.n)).collect();
                    if owners.windows(2).any(|w| w[0] != w[1]) {
                        return Err(Error::Precondition("polytope block spans several subsystems".into()));
                    }
                }
            }
        }
        Ok(Self {
            layout,
            rows,
            h,
            owner,
            noise,
        })
    }

    /// Upper and lower bounds on `x_1..x_T` and `u_0..u_{T-1}`; infinite
    /// bounds produce no row.
    pub fn boxes(model: &SystemModel, horizon: usize, bounds: &BoxBounds, noise: NoiseModel) -> Result<Self> {
        let layout = Layout::of(model, horizon);
        let (n, p) = (layout.n, layout.p);
        if bounds.x_lo.len() != n || bounds.x_hi.len() != n || bounds.u_lo.len() != p || bounds.u_hi.len() != p {
            return Err(Error::dim("box bounds do not match the model"));
        }
        let mut rows = Vec::new();
        let mut h = Vec::new();
        let mut owner = Vec::new();
        let mut push = |r: usize, hi: f64, lo: f64, o: usize| {
            if hi.is_finite() {
                rows.push(SparseRow::new([(r, 1.0)]));
                h.push(hi);
                owner.push(o);
            }
            if lo.is_finite() {
                rows.push(SparseRow::new([(r, -1.0)]));
                h.push(-lo);
                owner.push(o);
            }
        };
        let part = model.partition();
        for i in 0..part.n_subsystems() {
            for t in 1..=horizon {
                for k in part.state_range(i) {
                    push(layout.x_row(t, k), bounds.x_hi[k], bounds.x_lo[k], i);
                }
            }
            for t in 0..horizon {
                for k in part.input_range(i) {
                    push(layout.u_row(t, k), bounds.u_hi[k], bounds.u_lo[k], i);
                }
            }
        }
        Self::new(model, horizon, rows, h, owner, noise)
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn horizon(&self) -> usize {
        self.layout.horizon
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, k: usize) -> &SparseRow {
        &self.rows[k]
    }

    pub fn bound(&self, k: usize) -> f64 {
        self.h[k]
    }

    pub fn owner(&self, k: usize) -> usize {
        self.owner[k]
    }

    /// Constraint rows owned by subsystem `i`.
    pub fn rows_of(&self, i: usize) -> Vec<usize> {
        (0..self.rows.len()).filter(|&k| self.owner[k] == i).collect()
    }

    pub fn h_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.h)
    }

    pub fn dense_h(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows.len(), self.layout.rows());
        for (k, row) in self.rows.iter().enumerate() {
            for (c, v) in row.iter() {
                m[(k, c)] = v;
            }
        }
        m
    }

    pub fn with_noise(&self, noise: NoiseModel) -> Result<Self> {
        let mut out = self.clone();
        out.noise = noise;
        if let NoiseModel::Polytope(p) = &out.noise {
            if p.dim != self.horizon() * self.layout.n {
                return Err(Error::dim("polytope dimension does not match the horizon"));
            }
            p.validate()?;
        }
        Ok(out)
    }

    /// `H x - h` for a stacked trajectory.
    pub fn residual(&self, traj: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().zip(&self.h).map(|(r, &h)| r.dot(traj) - h))
    }

    /// Row `k` of `H Phi` restricted to the disturbance columns, as a dense
    /// vector over disturbance coordinates.
    pub fn h_phi_delta(&self, resp: &SystemResponse, k: usize) -> DVector<f64> {
        let n = self.layout.n;
        let mut out = DVector::zeros(self.layout.horizon * n);
        for (r, a) in self.rows[k].iter() {
            for c in n..self.layout.cols() {
                out[c - n] += a * resp.get(r, c);
            }
        }
        out
    }

    /// Row `k` of `H Phi{1} x0`.
    pub fn h_phi_x0(&self, resp: &SystemResponse, k: usize, x0: &DVector<f64>) -> f64 {
        self.rows[k]
            .iter()
            .map(|(r, a)| a * (0..self.layout.n).map(|c| resp.get(r, c) * x0[c]).sum::<f64>())
            .sum()
    }

    pub fn to_text(&self) -> String {
        let mut w = TextWriter::new(SPEC_MAGIC);
        match &self.noise {
            NoiseModel::None => w.line("noise", ["none"]),
            NoiseModel::LocalNormBound { norm, sigma } => {
                w.line("noise", ["local_bound".to_string(), norm.to_string(), fmt_f64(*sigma)])
            }
            NoiseModel::Polytope(p) => w.line("noise", ["polytope".to_string(), p.blocks.len().to_string()]),
        }
        w.line("dims", [self.layout.n, self.layout.p, self.layout.horizon]);
        w.line("rows", [self.rows.len()]);
        for k in 0..self.rows.len() {
            let mut vals = vec![self.owner[k].to_string(), fmt_f64(self.h[k]), self.rows[k].idx.len().to_string()];
            for (c, v) in self.rows[k].iter() {
                vals.push(c.to_string());
                vals.push(fmt_f64(v));
            }
            w.line("row", vals);
        }
        if let NoiseModel::Polytope(p) = &self.noise {
            for b in &p.blocks {
                w.line("pblock", &b.cols);
                w.matrix("G", &b.g_mat);
                w.matrix("g", &DMatrix::from_column_slice(b.g_vec.len(), 1, b.g_vec.as_slice()));
            }
        }
        w.finish()
    }

    pub fn from_text(text: &str, model: &SystemModel) -> Result<Self> {
        let mut r = TextReader::new(text, SPEC_MAGIC)?;
        let (nline, nvals) = r.key("noise")?;
        let nvals: Vec<String> = nvals.iter().map(|s| s.to_string()).collect();
        let dims = r.key_usizes("dims")?;
        let [n, p, horizon] = dims[..] else {
            return Err(Error::Parse {
                line: nline + 1,
                msg: "`dims` takes n, p and T".into(),
            });
        };
        if n != model.n_states() || p != model.n_inputs() {
            return Err(Error::dim("constraint file does not match the model"));
        }
        let count = r.key_usize("rows")?;
        let mut rows = Vec::with_capacity(count);
        let mut h = Vec::with_capacity(count);
        let mut owner = Vec::with_capacity(count);
        for _ in 0..count {
            let (line, vals) = r.key("row")?;
            if vals.len() < 3 {
                return Err(Error::Parse {
                    line,
                    msg: "row needs owner, bound and entry count".into(),
                });
            }
            owner.push(parse_num(vals[0], line)?);
            h.push(parse_num(vals[1], line)?);
            let nnz: usize = parse_num(vals[2], line)?;
            if vals.len() != 3 + 2 * nnz {
                return Err(Error::Parse {
                    line,
                    msg: format!("row declares {nnz} entries but has {} values", vals.len() - 3),
                });
            }
            let mut entries = Vec::with_capacity(nnz);
            for e in 0..nnz {
                entries.push((parse_num(vals[3 + 2 * e], line)?, parse_num(vals[4 + 2 * e], line)?));
            }
            rows.push(SparseRow::new(entries));
        }
        let noise = match nvals.first().map(String::as_str) {
            Some("none") => NoiseModel::None,
            Some("local_bound") if nvals.len() == 3 => NoiseModel::LocalNormBound {
                norm: nvals[1].parse()?,
                sigma: parse_num(&nvals[2], nline)?,
            },
            Some("polytope") if nvals.len() == 2 => {
                let nb: usize = parse_num(&nvals[1], nline)?;
                let mut blocks = Vec::with_capacity(nb);
                for _ in 0..nb {
                    let cols = r.key_usizes("pblock")?;
                    let g_mat = r.matrix("G")?;
                    let g = r.matrix("g")?;
                    blocks.push(PolyBlock {
                        cols,
                        g_mat,
                        g_vec: g.column(0).into_owned(),
                    });
                }
                NoiseModel::Polytope(Polytope { dim: horizon * n, blocks })
            }
            _ => {
                return Err(Error::Parse {
                    line: nline,
                    msg: format!("bad noise header `{}`", nvals.join(" ")),
                })
            }
        };
        if !r.is_done() {
            return Err(Error::Parse {
                line: 0,
                msg: "trailing content after constraint file".into(),
            });
        }
        Self::new(model, horizon, rows, h, owner, noise)
    }
}

/// `sum_t x_t' Q x_t + sum_{t<T} u_t' R u_t` with `Q`, `R` block-diagonal
/// over subsystems.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl QuadraticCost {
    pub fn identity(model: &SystemModel) -> Self {
        Self {
            q: DMatrix::identity(model.n_states(), model.n_states()),
            r: DMatrix::identity(model.n_inputs(), model.n_inputs()),
        }
    }

    pub fn validate(&self, model: &SystemModel) -> Result<()> {
        let part = model.partition();
        let (n, p) = (part.n_states(), part.n_inputs());
        if self.q.shape() != (n, n) || self.r.shape() != (p, p) {
            return Err(Error::dim("cost weights do not match the model"));
        }
        let state_owner = |k: usize| part.state_owner(k);
        let input_owner = |k: usize| part.input_owner(k);
        let weights: [(&DMatrix<f64>, &dyn Fn(usize) -> usize); 2] = [(&self.q, &state_owner), (&self.r, &input_owner)];
        for (m, owner) in weights {
            for a in 0..m.nrows() {
                for b in 0..m.ncols() {
                    if m[(a, b)] != 0.0 && owner(a) != owner(b) {
                        return Err(Error::Precondition("cost couples two subsystems".into()));
                    }
                    if (m[(a, b)] - m[(b, a)]).abs() > 1e-12 * (1.0 + m[(a, b)].abs()) {
                        return Err(Error::Precondition("cost weight is not symmetric".into()));
                    }
                }
            }
            if m.nrows() > 0 && m.clone().symmetric_eigenvalues().min() < -1e-10 {
                return Err(Error::Precondition("cost weight is not positive semidefinite".into()));
            }
        }
        Ok(())
    }

    /// Weight coupling stacked trajectory entries `a` and `b`.
    pub fn weight(&self, layout: &Layout, a: usize, b: usize) -> f64 {
        match (layout.row_kind(a), layout.row_kind(b)) {
            (RowKind::State { t: ta, k: ka }, RowKind::State { t: tb, k: kb }) if ta == tb => self.q[(ka, kb)],
            (RowKind::Input { t: ta, k: ka }, RowKind::Input { t: tb, k: kb }) if ta == tb && ta < layout.horizon => {
                self.r[(ka, kb)]
            }
            _ => 0.0,
        }
    }

    pub fn evaluate(&self, layout: &Layout, traj: &DVector<f64>) -> f64 {
        let mut total = 0.0;
        for t in 0..=layout.horizon {
            let x = traj.rows(layout.x_row(t, 0), layout.n);
            total += x.dot(&(&self.q * x));
        }
        for t in 0..layout.horizon {
            let u = traj.rows(layout.u_row(t, 0), layout.p);
            total += u.dot(&(&self.r * u));
        }
        total
    }
}

/// Nominal trajectory `Phi{1} x0`.
pub fn nominal_trajectory(resp: &SystemResponse, x0: &DVector<f64>) -> DVector<f64> {
    let n = resp.layout.n;
    let s = resp.stacked();
    s.columns(0, n) * x0
}

/// `H Phi{1} x0 - h`.
pub fn nominal_feasible(resp: &SystemResponse, x0: &DVector<f64>, spec: &ConstraintSpec) -> Result<DVector<f64>> {
    expect_case(spec, NoiseCase::NoiseFree)?;
    if x0.len() != resp.layout.n {
        return Err(Error::dim("x0 does not match the response"));
    }
    Ok(spec.residual(&nominal_trajectory(resp, x0)))
}

/// Disturbance coordinate groups: one per subsystem and time step.
pub fn delta_groups(model: &SystemModel, horizon: usize) -> Vec<Vec<usize>> {
    let part = model.partition();
    let n = part.n_states();
    (0..horizon)
        .flat_map(|t| (0..part.n_subsystems()).map(move |i| part.state_range(i).map(|k| t * n + k).collect()))
        .collect()
}

/// Worst case of `row . delta` over `||[delta]_g||_p <= sigma` for every group.
pub fn local_norm_worst_case(row: &DVector<f64>, groups: &[Vec<usize>], norm: LocalNorm, sigma: f64) -> f64 {
    let mut buf = Vec::new();
    groups
        .iter()
        .map(|g| {
            buf.clear();
            buf.extend(g.iter().map(|&c| row[c]));
            sigma * norm.dual(&buf)
        })
        .sum()
}

/// Per-row `[H Phi{1} x0] + sigma * sum_g ||[H Phi{2:T}]_{row,g}||_*`.
pub fn local_norm_lhs(resp: &SystemResponse, x0: &DVector<f64>, spec: &ConstraintSpec, model: &SystemModel) -> Result<DVector<f64>> {
    let NoiseModel::LocalNormBound { norm, sigma } = spec.noise else {
        return Err(Error::NoiseCase {
            expected: NoiseCase::LocalBound.name(),
            found: spec.noise.case().name(),
        });
    };
    let groups = delta_groups(model, spec.horizon());
    Ok(DVector::from_iterator(
        spec.n_rows(),
        (0..spec.n_rows()).map(|k| {
            spec.h_phi_x0(resp, k, x0) + local_norm_worst_case(&spec.h_phi_delta(resp, k), &groups, norm, sigma)
        }),
    ))
}

/// `(H Phi{1} x0 + Xi g - h, H Phi{2:T} - Xi G)`.
pub fn polytopic_constraints(
    resp: &SystemResponse,
    xi: &DMatrix<f64>,
    x0: &DVector<f64>,
    spec: &ConstraintSpec,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let NoiseModel::Polytope(poly) = &spec.noise else {
        return Err(Error::NoiseCase {
            expected: NoiseCase::Polytopic.name(),
            found: spec.noise.case().name(),
        });
    };
    let (g, gv) = poly.dense();
    if xi.shape() != (spec.n_rows(), g.nrows()) {
        return Err(Error::dim("Xi does not match H and G"));
    }
    if xi.iter().any(|&v| v < 0.0) {
        return Err(Error::Precondition("Xi has negative entries".into()));
    }
    let xig = xi * &gv;
    let ineq = DVector::from_iterator(
        spec.n_rows(),
        (0..spec.n_rows()).map(|k| spec.h_phi_x0(resp, k, x0) + xig[k] - spec.bound(k)),
    );
    let mut eq = DMatrix::zeros(spec.n_rows(), poly.dim);
    for k in 0..spec.n_rows() {
        eq.row_mut(k).copy_from(&spec.h_phi_delta(resp, k).transpose());
    }
    eq -= xi * g;
    Ok((ineq, eq))
}

/// Columns of `Phi` that row `k` of `H Phi` may touch under `masks`.
pub fn h_row_support(spec: &ConstraintSpec, masks_stacked: &DMatrix<bool>, k: usize) -> Vec<usize> {
    let cols = masks_stacked.ncols();
    (0..cols)
        .filter(|&c| spec.row(k).idx.iter().any(|&r| masks_stacked[(r, c)]))
        .collect()
}

/// Stacked spatial-and-causal mask of `[Phi_x; Phi_u]` with `Phi_u`'s last
/// block pinned.
pub fn stacked_mask(masks: &LocalityMasks) -> DMatrix<bool> {
    let n = masks.phi_x.pattern.ncols() / (masks.horizon + 1);
    let xr = masks.phi_x.pattern.nrows();
    let ur = masks.phi_u.pattern.nrows();
    let p = ur / (masks.horizon + 1);
    DMatrix::from_fn(xr + ur, masks.phi_x.pattern.ncols(), |r, c| {
        let tc = c / n;
        if r < xr {
            r / n >= tc && masks.phi_x.pattern[(r, c)]
        } else {
            let tr = (r - xr) / p;
            tr >= tc && tr < masks.horizon && masks.phi_u.pattern[(r - xr, c)]
        }
    })
}

/// Polytope blocks that row `k` of `Xi` may use: those whose columns meet
/// the support of `H Phi{2:T}` on that row.
fn xi_blocks_for_row(support: &[usize], n: usize, poly: &Polytope, col_block: &[Option<usize>]) -> Vec<usize> {
    let _ = poly;
    let mut out: Vec<usize> = support
        .iter()
        .filter(|&&c| c >= n)
        .filter_map(|&c| col_block[c - n])
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn column_blocks(poly: &Polytope) -> Vec<Option<usize>> {
    let mut out = vec![None; poly.dim];
    for (b, blk) in poly.blocks.iter().enumerate() {
        for &c in &blk.cols {
            out[c] = Some(b);
        }
    }
    out
}

/// Structural mask of `Xi` (rows of `H` by rows of `G`).
pub fn xi_mask(spec: &ConstraintSpec, masks: &LocalityMasks) -> Result<SparsityMask> {
    let NoiseModel::Polytope(poly) = &spec.noise else {
        return Err(Error::NoiseCase {
            expected: NoiseCase::Polytopic.name(),
            found: spec.noise.case().name(),
        });
    };
    let stacked = stacked_mask(masks);
    let n = spec.layout().n;
    let col_block = column_blocks(poly);
    let offsets = poly.row_offsets();
    let mut pattern = DMatrix::from_element(spec.n_rows(), poly.n_rows(), false);
    for k in 0..spec.n_rows() {
        let support = h_row_support(spec, &stacked, k);
        for b in xi_blocks_for_row(&support, n, poly, &col_block) {
            for r in 0..poly.blocks[b].g_mat.nrows() {
                pattern[(k, offsets[b] + r)] = true;
            }
        }
    }
    Ok(SparsityMask {
        kind: MaskKind::Xi,
        pattern,
    })
}

/// A row of the augmented variable: a copy of a response row, or the
/// constraint-row copy `Omega = H Psi` for one row of `H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugRow {
    Nominal(usize),
    Omega(usize),
}

/// Sparse layout and values of the augmented pair `Phi~ = H~ Psi~`.
///
/// Entries are `(augmented row, response column)` pairs stored row-major.
/// `phi` holds `Phi~`, `hpsi` holds `H~ Psi~` and `lambda` the scaled dual.
/// In the noise-free case only nominal rows over the `x0` columns exist. In
/// the robust cases nominal rows keep the `x0` columns (the zero upper-right
/// block is not stored) and one `Omega` row per constraint row spans all of
/// its structurally nonzero columns.
#[derive(Debug, Clone)]
pub struct AugmentedPair {
    pub case: NoiseCase,
    pub layout: Layout,
    pub rows: Vec<AugRow>,
    pub row_owner: Vec<usize>,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    /// Polytope blocks available to each constraint row (polytopic case).
    pub xi_blocks: Vec<Vec<usize>>,
    pub phi: Vec<f64>,
    pub hpsi: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl AugmentedPair {
    pub fn n_entries(&self) -> usize {
        self.cols.len()
    }

    pub fn entries(&self, a: usize) -> std::ops::Range<usize> {
        self.row_ptr[a]..self.row_ptr[a + 1]
    }

    /// `H~` restricted to augmented row `a`, as response-row coefficients.
    pub fn h_tilde(&self, spec: &ConstraintSpec, a: usize) -> Vec<(usize, f64)> {
        match self.rows[a] {
            AugRow::Nominal(r) => vec![(r, 1.0)],
            AugRow::Omega(k) => spec.row(k).iter().collect(),
        }
    }

    /// Sets `hpsi = H~ Psi~` for a response `psi`.
    pub fn set_hpsi_from(&mut self, spec: &ConstraintSpec, psi: &SystemResponse) {
        for a in 0..self.rows.len() {
            let ht = self.h_tilde(spec, a);
            for e in self.entries(a) {
                let c = self.cols[e];
                self.hpsi[e] = ht.iter().map(|&(r, w)| w * psi.get(r, c)).sum();
            }
        }
    }

    /// `||Phi~ - H~ Psi~||_F`.
    pub fn consensus_residual(&self) -> f64 {
        self.phi.iter().zip(&self.hpsi).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

/// Zero-initialized augmented pair for the constraint set's noise case.
pub fn build_augmented(case: NoiseCase, model: &SystemModel, spec: &ConstraintSpec, masks: &LocalityMasks) -> Result<AugmentedPair> {
    if case != spec.noise.case() {
        return Err(Error::NoiseCase {
            expected: case.name(),
            found: spec.noise.case().name(),
        });
    }
    let layout = Layout::of(model, masks.horizon);
    if spec.horizon() != masks.horizon || spec.layout() != layout {
        return Err(Error::dim("spec, masks and model disagree on dimensions"));
    }
    let stacked = stacked_mask(masks);
    let n = layout.n;
    let mut rows = Vec::new();
    let mut row_owner = Vec::new();
    let mut row_ptr = vec![0];
    let mut cols = Vec::new();
    for r in 0..layout.rows() {
        let cs: Vec<usize> = (0..n).filter(|&c| stacked[(r, c)]).collect();
        if cs.is_empty() {
            continue;
        }
        rows.push(AugRow::Nominal(r));
        row_owner.push(layout.row_owner(model, r));
        cols.extend(cs);
        row_ptr.push(cols.len());
    }
    let mut xi_blocks = Vec::new();
    if case != NoiseCase::NoiseFree {
        let poly = match &spec.noise {
            NoiseModel::Polytope(p) => Some((p, column_blocks(p))),
            _ => None,
        };
        for k in 0..spec.n_rows() {
            let support = h_row_support(spec, &stacked, k);
            let mut cs: Vec<usize> = support.iter().copied().filter(|&c| c < n).collect();
            match &poly {
                Some((p, cb)) => {
                    let blocks = xi_blocks_for_row(&support, n, p, cb);
                    let mut dc: Vec<usize> = blocks.iter().flat_map(|&b| p.blocks[b].cols.iter().map(|&c| c + n)).collect();
                    dc.sort_unstable();
                    cs.extend(dc);
                    xi_blocks.push(blocks);
                }
                None => cs.extend(support.iter().copied().filter(|&c| c >= n)),
            }
            rows.push(AugRow::Omega(k));
            row_owner.push(spec.owner(k));
            cols.extend(cs);
            row_ptr.push(cols.len());
        }
    }
    let ne = cols.len();
    Ok(AugmentedPair {
        case,
        layout,
        rows,
        row_owner,
        row_ptr,
        cols,
        xi_blocks,
        phi: vec![0.0; ne],
        hpsi: vec![0.0; ne],
        lambda: vec![0.0; ne],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_power_grid, locality_masks, GridParams, Partition};

    fn chain(n: usize) -> SystemModel {
        let a = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else if i == j + 1 { 0.5 } else { 0.0 });
        SystemModel::new(a, DMatrix::identity(n, n), Partition::uniform(n, 1, 1).unwrap()).unwrap()
    }

    fn unit_box(model: &SystemModel, t: usize, noise: NoiseModel) -> ConstraintSpec {
        let b = BoxBounds::symmetric(DVector::from_element(model.n_states(), 1.0), DVector::from_element(model.n_inputs(), 2.0));
        ConstraintSpec::boxes(model, t, &b, noise).unwrap()
    }

    #[test]
    fn origin_is_nominally_feasible() {
        let m = chain(3);
        let spec = unit_box(&m, 2, NoiseModel::None);
        let resp = SystemResponse::zeros(&m, &locality_masks(&m, 1, 2)).unwrap();
        let r = nominal_feasible(&resp, &DVector::zeros(3), &spec).unwrap();
        assert!(r.iter().all(|&v| v <= 0.0));
    }

    #[test]
    fn negative_bound_is_infeasible() {
        let m = chain(2);
        let mut spec = unit_box(&m, 2, NoiseModel::None);
        spec.h.iter_mut().for_each(|h| *h = -1.0);
        let resp = SystemResponse::zeros(&m, &locality_masks(&m, 1, 2)).unwrap();
        let r = nominal_feasible(&resp, &DVector::from_element(2, 0.3), &spec).unwrap();
        assert!(r.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn wrong_case_is_rejected() {
        let m = chain(2);
        let spec = unit_box(&m, 2, NoiseModel::LocalNormBound { norm: LocalNorm::Inf, sigma: 0.1 });
        let resp = SystemResponse::zeros(&m, &locality_masks(&m, 1, 2)).unwrap();
        assert!(matches!(nominal_feasible(&resp, &DVector::zeros(2), &spec), Err(Error::NoiseCase { .. })));
    }

    #[test]
    fn rows_must_stay_inside_their_subsystem() {
        let m = chain(2);
        let layout = Layout::of(&m, 1);
        let bad = SparseRow::new([(layout.x_row(1, 0), 1.0), (layout.x_row(1, 1), 1.0)]);
        let r = ConstraintSpec::new(&m, 1, vec![bad], vec![1.0], vec![0], NoiseModel::None);
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn zero_sigma_reduces_to_nominal() {
        let m = chain(3);
        let masks = locality_masks(&m, 1, 2);
        let spec = unit_box(&m, 2, NoiseModel::LocalNormBound { norm: LocalNorm::Inf, sigma: 0.0 });
        let mut resp = SystemResponse::zeros(&m, &masks).unwrap();
        for (r, c) in [(3, 0), (4, 1), (5, 3), (7, 2)] {
            if resp.allows(r, c) {
                resp.set(r, c, 0.7).unwrap();
            }
        }
        let x0 = DVector::from_vec(vec![0.2, -0.5, 1.0]);
        let lhs = local_norm_lhs(&resp, &x0, &spec, &m).unwrap();
        let nominal = spec.residual(&nominal_trajectory(&resp, &x0)) + spec.h_vec();
        assert!((lhs - nominal).abs().max() < 1e-15);
    }

    #[test]
    fn box_detection() {
        let m = chain(2);
        let p = Polytope::local_box(&m, 2, &DVector::from_element(2, -0.1), &DVector::from_element(2, 0.2)).unwrap();
        let b = p.blocks[0].as_box().unwrap();
        assert_eq!(b, vec![(-0.1, 0.2)]);
        assert_eq!(p.n_rows(), 8);
        let (g, gv) = p.dense();
        assert_eq!(g.shape(), (8, 4));
        assert!(p.contains(&DVector::from_element(4, 0.15), 0.0));
        assert!(!p.contains(&DVector::from_element(4, -0.15), 0.0));
        assert_eq!(gv[1], 0.1);
    }

    #[test]
    fn xi_mask_is_full_for_dense_masks() {
        let m = chain(3);
        let masks = locality_masks(&m, 5, 2);
        let poly = Polytope::local_box(&m, 2, &DVector::from_element(3, -1.0), &DVector::from_element(3, 1.0)).unwrap();
        let spec = unit_box(&m, 2, NoiseModel::Polytope(poly));
        let xm = xi_mask(&spec, &masks).unwrap();
        // Row k of subsystem i at time t sees delta_0..delta_{t-1} of every
        // upstream subsystem j <= i of the chain, through two G rows each.
        let layout = spec.layout();
        for k in 0..spec.n_rows() {
            let t = layout.row_time(spec.row(k).idx[0]);
            let expected = t * (spec.owner(k) + 1) * 2;
            let count = (0..xm.pattern.ncols()).filter(|&j| xm.allows(k, j)).count();
            assert_eq!(count, expected, "row {k}");
        }
    }

    #[test]
    fn text_round_trip() {
        let grid = generate_power_grid(&GridParams::baseline(3)).unwrap();
        let m = &grid.model;
        let poly = Polytope::local_box(m, 3, &DVector::from_element(m.n_states(), -0.1), &DVector::from_element(m.n_states(), 0.1)).unwrap();
        for noise in [
            NoiseModel::None,
            NoiseModel::LocalNormBound { norm: LocalNorm::Two, sigma: 0.25 },
            NoiseModel::Polytope(poly),
        ] {
            let spec = unit_box(m, 3, noise);
            let text = spec.to_text();
            let back = ConstraintSpec::from_text(&text, m).unwrap();
            assert_eq!(back, spec);
            assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn noise_free_augmented_has_x0_columns_only() {
        let grid = generate_power_grid(&GridParams::baseline(1)).unwrap();
        let m = &grid.model;
        let masks = locality_masks(m, 3, 5);
        let spec = unit_box(m, 5, NoiseModel::None);
        let aug = build_augmented(NoiseCase::NoiseFree, m, &spec, &masks).unwrap();
        assert!(aug.cols.iter().all(|&c| c < m.n_states()));
        assert!(aug.rows.iter().all(|r| matches!(r, AugRow::Nominal(_))));
        assert!(matches!(
            build_augmented(NoiseCase::LocalBound, m, &spec, &masks),
            Err(Error::NoiseCase { .. })
        ));
    }

    #[test]
    fn weights_follow_time_blocks() {
        let m = chain(2);
        let layout = Layout::of(&m, 2);
        let cost = QuadraticCost::identity(&m);
        assert_eq!(cost.weight(&layout, layout.x_row(2, 1), layout.x_row(2, 1)), 1.0);
        assert_eq!(cost.weight(&layout, layout.u_row(2, 0), layout.u_row(2, 0)), 0.0);
        assert_eq!(cost.weight(&layout, layout.u_row(1, 0), layout.u_row(1, 0)), 1.0);
        assert!(cost.validate(&m).is_ok());
    }
}
