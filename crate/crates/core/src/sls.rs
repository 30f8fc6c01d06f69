//! Finite-horizon system responses.
//!
//! Column block 0 of every operator maps the initial condition `x0`; column
//! blocks `1..=T` map the disturbances `delta_0..delta_{T-1}`. Row blocks are
//! time steps `0..=T`. `Phi_u` carries `T + 1` row blocks, the last of which
//! never reaches the state and is pinned to zero.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{LocalityMasks, SystemModel};
use crate::textfmt::{TextReader, TextWriter};

/// Row/column indexing of the stacked response `[Phi_x; Phi_u]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
    pub p: usize,
    pub horizon: usize,
}

/// What a row of the stacked response parametrizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    State { t: usize, k: usize },
    Input { t: usize, k: usize },
}

impl Layout {
    pub fn of(model: &SystemModel, horizon: usize) -> Self {
        Self {
            n: model.n_states(),
            p: model.n_inputs(),
            horizon,
        }
    }

    pub fn blocks(&self) -> usize {
        self.horizon + 1
    }

    pub fn x_rows(&self) -> usize {
        self.blocks() * self.n
    }

    pub fn u_rows(&self) -> usize {
        self.blocks() * self.p
    }

    /// Rows of the stacked response (and of the trajectory `[x; u]`).
    pub fn rows(&self) -> usize {
        self.x_rows() + self.u_rows()
    }

    pub fn cols(&self) -> usize {
        self.blocks() * self.n
    }

    pub fn x_row(&self, t: usize, k: usize) -> usize {
        t * self.n + k
    }

    pub fn u_row(&self, t: usize, k: usize) -> usize {
        self.x_rows() + t * self.p + k
    }

    pub fn col(&self, t: usize, k: usize) -> usize {
        t * self.n + k
    }

    pub fn row_kind(&self, r: usize) -> RowKind {
        if r < self.x_rows() {
            RowKind::State {
                t: r / self.n,
                k: r % self.n,
            }
        } else {
            let q = r - self.x_rows();
            RowKind::Input {
                t: q / self.p,
                k: q % self.p,
            }
        }
    }

    /// Time block of a column.
    pub fn col_time(&self, c: usize) -> usize {
        c / self.n
    }

    /// Time block of a row.
    pub fn row_time(&self, r: usize) -> usize {
        match self.row_kind(r) {
            RowKind::State { t, .. } | RowKind::Input { t, .. } => t,
        }
    }

    /// Subsystem owning a stacked row.
    pub fn row_owner(&self, model: &SystemModel, r: usize) -> usize {
        match self.row_kind(r) {
            RowKind::State { k, .. } => model.partition().state_owner(k),
            RowKind::Input { k, .. } => model.partition().input_owner(k),
        }
    }

    pub fn col_owner(&self, model: &SystemModel, c: usize) -> usize {
        model.partition().state_owner(c % self.n)
    }
}

/// Block-lower-triangular operator stored densely with an attached mask.
/// Entries outside the mask are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOperator {
    block_rows: usize,
    block_cols: usize,
    horizon: usize,
    data: DMatrix<f64>,
    mask: DMatrix<bool>,
}

impl BlockOperator {
    /// Zero operator whose mask is `spatial` intersected with causality and,
    /// when `pin_last` is set, with a zero last row block.
    pub fn zeros(spatial: &DMatrix<bool>, block_rows: usize, block_cols: usize, horizon: usize, pin_last: bool) -> Result<Self> {
        let blocks = horizon + 1;
        if spatial.shape() != (blocks * block_rows, blocks * block_cols) {
            return Err(Error::dim(format!(
                "mask is {:?}, expected {:?}",
                spatial.shape(),
                (blocks * block_rows, blocks * block_cols)
            )));
        }
        let mask = DMatrix::from_fn(spatial.nrows(), spatial.ncols(), |r, c| {
            let (s, t) = (r / block_rows.max(1), c / block_cols.max(1));
            spatial[(r, c)] && t <= s && !(pin_last && s == horizon)
        });
        Ok(Self {
            block_rows,
            block_cols,
            horizon,
            data: DMatrix::zeros(spatial.nrows(), spatial.ncols()),
            mask,
        })
    }

    /// Wraps `data`, failing if any entry outside the effective mask is nonzero.
    pub fn with_data(mut self, data: DMatrix<f64>) -> Result<Self> {
        if data.shape() != self.data.shape() {
            return Err(Error::dim(format!("data is {:?}, operator is {:?}", data.shape(), self.data.shape())));
        }
        self.data = data;
        if let Some((r, c)) = self.first_violation() {
            return Err(Error::Precondition(format!("entry ({r}, {c}) is outside the operator's mask")));
        }
        Ok(self)
    }

    fn first_violation(&self) -> Option<(usize, usize)> {
        (0..self.data.ncols())
            .flat_map(|c| (0..self.data.nrows()).map(move |r| (r, c)))
            .find(|&(r, c)| !self.mask[(r, c)] && self.data[(r, c)] != 0.0)
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn block_rows(&self) -> usize {
        self.block_rows
    }

    pub fn allows(&self, r: usize, c: usize) -> bool {
        self.mask[(r, c)]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[(r, c)]
    }

    /// Sets an allowed entry; writes outside the mask are rejected.
    pub fn set(&mut self, r: usize, c: usize, v: f64) -> Result<()> {
        if !self.mask[(r, c)] {
            return Err(Error::Precondition(format!("entry ({r}, {c}) is masked out")));
        }
        self.data[(r, c)] = v;
        Ok(())
    }

    /// Zeroes every entry outside the mask.
    pub fn project(&mut self) {
        let mask = &self.mask;
        for (v, &m) in self.data.iter_mut().zip(mask.iter()) {
            if !m {
                *v = 0.0;
            }
        }
    }

    /// Strict upper block triangle is bit-zero.
    pub fn is_causal(&self) -> bool {
        let (br, bc) = (self.block_rows.max(1), self.block_cols.max(1));
        (0..self.data.ncols()).all(|c| (0..self.data.nrows()).all(|r| c / bc <= r / br || self.data[(r, c)] == 0.0))
    }

    /// Every entry outside the mask is bit-zero.
    pub fn respects_mask(&self) -> bool {
        self.first_violation().is_none()
    }

    pub fn block(&self, s: usize, t: usize) -> DMatrix<f64> {
        self.data
            .view((s * self.block_rows, t * self.block_cols), (self.block_rows, self.block_cols))
            .into_owned()
    }
}

/// The pair `(Phi_x, Phi_u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemResponse {
    pub layout: Layout,
    pub phi_x: BlockOperator,
    pub phi_u: BlockOperator,
}

const RESPONSE_MAGIC: &str = "dlmpc-response v1";

impl SystemResponse {
    pub fn zeros(model: &SystemModel, masks: &LocalityMasks) -> Result<Self> {
        let layout = Layout::of(model, masks.horizon);
        Ok(Self {
            phi_x: BlockOperator::zeros(&masks.phi_x.pattern, layout.n, layout.n, layout.horizon, false)?,
            phi_u: BlockOperator::zeros(&masks.phi_u.pattern, layout.p, layout.n, layout.horizon, true)?,
            layout,
        })
    }

    /// Unconstrained (all-true spatial mask) zero response.
    pub fn zeros_dense(layout: Layout) -> Self {
        let fx = DMatrix::from_element(layout.x_rows(), layout.cols(), true);
        let fu = DMatrix::from_element(layout.u_rows(), layout.cols(), true);
        Self {
            phi_x: BlockOperator::zeros(&fx, layout.n, layout.n, layout.horizon, false).unwrap(),
            phi_u: BlockOperator::zeros(&fu, layout.p, layout.n, layout.horizon, true).unwrap(),
            layout,
        }
    }

    /// Effective mask of the stacked response.
    pub fn allows(&self, r: usize, c: usize) -> bool {
        if r < self.layout.x_rows() {
            self.phi_x.allows(r, c)
        } else {
            self.phi_u.allows(r - self.layout.x_rows(), c)
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        if r < self.layout.x_rows() {
            self.phi_x.get(r, c)
        } else {
            self.phi_u.get(r - self.layout.x_rows(), c)
        }
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) -> Result<()> {
        let xr = self.layout.x_rows();
        if r < xr {
            self.phi_x.set(r, c, v)
        } else {
            self.phi_u.set(r - xr, c, v)
        }
    }

    /// Dense `[Phi_x; Phi_u]`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.layout.rows(), self.layout.cols());
        out.rows_mut(0, self.layout.x_rows()).copy_from(self.phi_x.data());
        out.rows_mut(self.layout.x_rows(), self.layout.u_rows()).copy_from(self.phi_u.data());
        out
    }

    /// Effective stacked mask (spatial, causal, pinned rows).
    pub fn stacked_mask(&self) -> DMatrix<bool> {
        DMatrix::from_fn(self.layout.rows(), self.layout.cols(), |r, c| self.allows(r, c))
    }

    pub fn is_causal(&self) -> bool {
        self.phi_x.is_causal() && self.phi_u.is_causal()
    }

    pub fn respects_masks(&self) -> bool {
        self.phi_x.respects_mask() && self.phi_u.respects_mask()
    }

    pub fn to_text(&self) -> String {
        let to01 = |m: &DMatrix<bool>| m.map(|b| if b { 1.0 } else { 0.0 });
        let mut w = TextWriter::new(RESPONSE_MAGIC);
        w.line("dims", [self.layout.n, self.layout.p, self.layout.horizon]);
        w.matrix("Phi_x", self.phi_x.data());
        w.matrix("mask_Phi_x", &to01(self.phi_x.mask()));
        w.matrix("Phi_u", self.phi_u.data());
        w.matrix("mask_Phi_u", &to01(self.phi_u.mask()));
        w.finish()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = TextReader::new(text, RESPONSE_MAGIC)?;
        let dims = r.key_usizes("dims")?;
        let [n, p, horizon] = dims[..] else {
            return Err(Error::Parse {
                line: 2,
                msg: "dims takes n p T".into(),
            });
        };
        let layout = Layout { n, p, horizon };
        let read_op = |r: &mut TextReader<'_>, name: &str, br: usize, pin: bool| -> Result<BlockOperator> {
            let data = r.matrix(name)?;
            let mask = r.matrix(&format!("mask_{name}"))?.map(|v| v != 0.0);
            BlockOperator::zeros(&mask, br, n, horizon, pin)?.with_data(data)
        };
        let phi_x = read_op(&mut r, "Phi_x", n, false)?;
        let phi_u = read_op(&mut r, "Phi_u", p, true)?;
        Ok(Self { layout, phi_x, phi_u })
    }
}

/// Disturbance signal `w = [x0; delta_0; ...; delta_{T-1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceSignal {
    pub x0: DVector<f64>,
    pub deltas: Vec<DVector<f64>>,
}

impl DisturbanceSignal {
    pub fn stacked(&self) -> DVector<f64> {
        let n = self.x0.len();
        let mut w = DVector::zeros(n * (self.deltas.len() + 1));
        w.rows_mut(0, n).copy_from(&self.x0);
        for (t, d) in self.deltas.iter().enumerate() {
            w.rows_mut((t + 1) * n, n).copy_from(d);
        }
        w
    }
}

/// `Z_AB = [I - Z A_hat, -Z B_hat]` as a dense matrix.
pub fn z_ab(model: &SystemModel, horizon: usize) -> DMatrix<f64> {
    let l = Layout::of(model, horizon);
    let mut z = DMatrix::zeros(l.x_rows(), l.rows());
    for t in 0..l.blocks() {
        z.view_mut((t * l.n, t * l.n), (l.n, l.n)).fill_with_identity();
        if t + 1 < l.blocks() {
            let r0 = (t + 1) * l.n;
            z.view_mut((r0, t * l.n), (l.n, l.n)).copy_from(&(-model.a()));
            z.view_mut((r0, l.x_rows() + t * l.p), (l.n, l.p)).copy_from(&(-model.b()));
        }
    }
    z
}

/// `[I - Z A_hat, -Z B_hat] [Phi_x; Phi_u] - I`, evaluated block-recursively.
pub fn achievability_residual(resp: &SystemResponse, model: &SystemModel) -> Result<DMatrix<f64>> {
    let l = resp.layout;
    if l.n != model.n_states() || l.p != model.n_inputs() {
        return Err(Error::dim("response does not match model dimensions"));
    }
    let px = resp.phi_x.data();
    let pu = resp.phi_u.data();
    let mut res = px.clone();
    for c in 0..l.cols() {
        res[(c, c)] -= 1.0;
    }
    for t in 0..l.horizon {
        let prop = model.a() * px.rows(t * l.n, l.n) + model.b() * pu.rows(t * l.p, l.p);
        let mut rows = res.rows_mut((t + 1) * l.n, l.n);
        rows -= prop;
    }
    Ok(res)
}

/// `x = Phi_x w`, `u = Phi_u w`.
pub fn closed_loop_map(resp: &SystemResponse, w: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    if w.len() != resp.layout.cols() {
        return Err(Error::dim(format!("w has length {}, expected {}", w.len(), resp.layout.cols())));
    }
    Ok((resp.phi_x.data() * w, resp.phi_u.data() * w))
}

/// Runs the disturbance-reconstruction realization against the plant.
///
/// At each step the controller forms `u_t = sum_s Phi_u[t,s] w_hat_s`, the
/// plant advances with the true disturbance, and the new disturbance
/// estimate is `w_hat_{t+1} = x_{t+1} - sum_{s<=t} Phi_x[t+1,s] w_hat_s`.
/// Returns stacked `x` (length `(T+1)n`) and `u` (length `(T+1)p`, last
/// block zero).
pub fn controller_rollout(
    resp: &SystemResponse,
    model: &SystemModel,
    x0: &DVector<f64>,
    deltas: &[DVector<f64>],
) -> Result<(DVector<f64>, DVector<f64>)> {
    let l = resp.layout;
    if x0.len() != l.n || deltas.len() != l.horizon || deltas.iter().any(|d| d.len() != l.n) {
        return Err(Error::dim("rollout needs x0 of length n and T disturbances of length n"));
    }
    let px = resp.phi_x.data();
    let pu = resp.phi_u.data();
    let mut w_hat: Vec<DVector<f64>> = vec![x0.clone()];
    let mut x = DVector::zeros(l.x_rows());
    let mut u = DVector::zeros(l.u_rows());
    x.rows_mut(0, l.n).copy_from(x0);
    let mut x_t = x0.clone();
    for t in 0..l.horizon {
        let mut u_t = DVector::zeros(l.p);
        for (s, ws) in w_hat.iter().enumerate() {
            u_t += pu.view((t * l.p, s * l.n), (l.p, l.n)) * ws;
        }
        let x_next = model.a() * &x_t + model.b() * &u_t + &deltas[t];
        let mut x_hat = DVector::zeros(l.n);
        for (s, ws) in w_hat.iter().enumerate() {
            x_hat += px.view(((t + 1) * l.n, s * l.n), (l.n, l.n)) * ws;
        }
        w_hat.push(&x_next - x_hat);
        u.rows_mut(t * l.p, l.p).copy_from(&u_t);
        x.rows_mut((t + 1) * l.n, l.n).copy_from(&x_next);
        x_t = x_next;
    }
    Ok((x, u))
}

/// Fills the disturbance columns with the first block column shifted in
/// time, leaving the pinned last input block at zero.
pub fn fill_shifted_columns(resp: &mut SystemResponse) -> Result<()> {
    let l = resp.layout;
    for s in 1..=l.horizon {
        for k in 0..l.n {
            let c = l.col(s, k);
            for t in s..=l.horizon {
                for q in 0..l.n {
                    let v = resp.get(l.x_row(t - s, q), k);
                    if v != 0.0 {
                        resp.set(l.x_row(t, q), c, v)?;
                    }
                }
                if t < l.horizon {
                    for q in 0..l.p {
                        let v = resp.get(l.u_row(t - s, q), k);
                        if v != 0.0 {
                            resp.set(l.u_row(t, q), c, v)?;
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// First control action `Phi_u,0[0] x0`.
pub fn extract_u0(resp: &SystemResponse, x0: &DVector<f64>) -> DVector<f64> {
    let l = resp.layout;
    resp.phi_u.data().view((0, 0), (l.p, l.n)) * x0
}
