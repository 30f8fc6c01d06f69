//! Plant description: block-partitioned LTI dynamics, the interconnection
//! graph derived from them, d-hop neighborhoods and the locality masks they
//! induce on system responses.

use std::collections::VecDeque;
use std::ops::Range;

use nalgebra::DMatrix;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::textfmt::{TextReader, TextWriter};

/// Subsystem-wise split of the state and input vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    state_dims: Vec<usize>,
    input_dims: Vec<usize>,
    state_offsets: Vec<usize>,
    input_offsets: Vec<usize>,
    state_owner: Vec<usize>,
    input_owner: Vec<usize>,
}

fn offsets(dims: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(dims.len() + 1);
    let mut acc = 0;
    out.push(0);
    for d in dims {
        acc += d;
        out.push(acc);
    }
    out
}

fn owners(dims: &[usize]) -> Vec<usize> {
    dims.iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
        .collect()
}

impl Partition {
    pub fn new(state_dims: Vec<usize>, input_dims: Vec<usize>) -> Result<Self> {
        if state_dims.len() != input_dims.len() {
            return Err(Error::dim(format!(
                "{} state blocks but {} input blocks",
                state_dims.len(),
                input_dims.len()
            )));
        }
        if state_dims.is_empty() {
            return Err(Error::dim("partition has no subsystems"));
        }
        Ok(Self {
            state_offsets: offsets(&state_dims),
            input_offsets: offsets(&input_dims),
            state_owner: owners(&state_dims),
            input_owner: owners(&input_dims),
            state_dims,
            input_dims,
        })
    }

    /// `count` identical subsystems.
    pub fn uniform(count: usize, state_dim: usize, input_dim: usize) -> Result<Self> {
        Self::new(vec![state_dim; count], vec![input_dim; count])
    }

    pub fn n_subsystems(&self) -> usize {
        self.state_dims.len()
    }

    pub fn n_states(&self) -> usize {
        *self.state_offsets.last().unwrap()
    }

    pub fn n_inputs(&self) -> usize {
        *self.input_offsets.last().unwrap()
    }

    pub fn state_dims(&self) -> &[usize] {
        &self.state_dims
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn state_range(&self, i: usize) -> Range<usize> {
        self.state_offsets[i]..self.state_offsets[i + 1]
    }

    pub fn input_range(&self, i: usize) -> Range<usize> {
        self.input_offsets[i]..self.input_offsets[i + 1]
    }

    /// Subsystem owning global state index `k`.
    pub fn state_owner(&self, k: usize) -> usize {
        self.state_owner[k]
    }

    pub fn input_owner(&self, k: usize) -> usize {
        self.input_owner[k]
    }
}

/// Directed interconnection graph over subsystems. An edge `j -> i` means
/// subsystem `j` enters the dynamics of subsystem `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    succ: Vec<Vec<usize>>,
    pred: Vec<Vec<usize>>,
}

impl Graph {
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut succ = vec![Vec::new(); n];
        let mut pred = vec![Vec::new(); n];
        for (from, to) in edges {
            succ[from].push(to);
            pred[to].push(from);
        }
        for v in succ.iter_mut().chain(pred.iter_mut()) {
            v.sort_unstable();
            v.dedup();
        }
        Self { succ, pred }
    }

    pub fn n_nodes(&self) -> usize {
        self.succ.len()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.succ[from].binary_search(&to).is_ok()
    }

    /// All edges `(from, to)` in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.succ
            .iter()
            .enumerate()
            .flat_map(|(f, ts)| ts.iter().map(move |&t| (f, t)))
            .collect()
    }

    pub fn successors(&self, i: usize) -> &[usize] {
        &self.succ[i]
    }

    pub fn predecessors(&self, i: usize) -> &[usize] {
        &self.pred[i]
    }

    fn bfs(adj: &[Vec<usize>], src: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; adj.len()];
        dist[src] = Some(0);
        let mut queue = VecDeque::from([src]);
        while let Some(v) = queue.pop_front() {
            let dv = dist[v].unwrap();
            for &w in &adj[v] {
                if dist[w].is_none() {
                    dist[w] = Some(dv + 1);
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    /// `dist(src -> j)` for every `j`.
    pub fn distances_from(&self, src: usize) -> Vec<Option<usize>> {
        Self::bfs(&self.succ, src)
    }

    /// `dist(j -> dst)` for every `j`.
    pub fn distances_to(&self, dst: usize) -> Vec<Option<usize>> {
        Self::bfs(&self.pred, dst)
    }

    pub fn distance(&self, from: usize, to: usize) -> Option<usize> {
        self.distances_from(from)[to]
    }

    /// Largest finite shortest-path length.
    pub fn diameter(&self) -> usize {
        (0..self.n_nodes())
            .flat_map(|i| self.distances_from(i))
            .flatten()
            .max()
            .unwrap_or(0)
    }
}

/// Edge `j -> i` iff `[A]_ij != 0` or `[B]_ij != 0`.
pub fn derive_graph(a: &DMatrix<f64>, b: &DMatrix<f64>, partition: &Partition) -> Result<Graph> {
    let n = partition.n_states();
    let p = partition.n_inputs();
    if a.shape() != (n, n) {
        return Err(Error::dim(format!("A is {:?}, partition needs ({n}, {n})", a.shape())));
    }
    if b.shape() != (n, p) {
        return Err(Error::dim(format!("B is {:?}, partition needs ({n}, {p})", b.shape())));
    }
    let ns = partition.n_subsystems();
    let mut edges = Vec::new();
    for i in 0..ns {
        let ri = partition.state_range(i);
        for j in 0..ns {
            let a_blk = a.view((ri.start, partition.state_range(j).start), (ri.len(), partition.state_dims()[j]));
            let b_blk = b.view((ri.start, partition.input_range(j).start), (ri.len(), partition.input_dims()[j]));
            if a_blk.iter().chain(b_blk.iter()).any(|&v| v != 0.0) {
                edges.push((j, i));
            }
        }
    }
    Ok(Graph::from_edges(ns, edges))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    partition: Partition,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    graph: Graph,
}

const MODEL_MAGIC: &str = "dlmpc-model v1";

impl SystemModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, partition: Partition) -> Result<Self> {
        let graph = derive_graph(&a, &b, &partition)?;
        Ok(Self { partition, a, b, graph })
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn n_subsystems(&self) -> usize {
        self.partition.n_subsystems()
    }

    pub fn n_states(&self) -> usize {
        self.partition.n_states()
    }

    pub fn n_inputs(&self) -> usize {
        self.partition.n_inputs()
    }

    pub fn to_text(&self) -> String {
        let mut w = TextWriter::new(MODEL_MAGIC);
        w.line("subsystems", [self.n_subsystems()]);
        w.line("state_dims", self.partition.state_dims());
        w.line("input_dims", self.partition.input_dims());
        w.matrix("A", &self.a);
        w.matrix("B", &self.b);
        w.finish()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = TextReader::new(text, MODEL_MAGIC)?;
        Self::read(&mut r)
    }

    pub(crate) fn read(r: &mut TextReader<'_>) -> Result<Self> {
        let ns = r.key_usize("subsystems")?;
        let sd = r.key_usizes("state_dims")?;
        let id = r.key_usizes("input_dims")?;
        if sd.len() != ns || id.len() != ns {
            return Err(Error::dim("dimension lists disagree with subsystem count"));
        }
        let partition = Partition::new(sd, id)?;
        let a = r.matrix("A")?;
        let b = r.matrix("B")?;
        Self::new(a, b, partition)
    }
}

/// d-outgoing and d-incoming sets of every subsystem, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalitySets {
    pub d: usize,
    pub out_sets: Vec<Vec<usize>>,
    pub in_sets: Vec<Vec<usize>>,
}

impl LocalitySets {
    pub fn in_out(&self, i: usize, j: usize) -> bool {
        self.out_sets[j].binary_search(&i).is_ok()
    }
}

pub fn d_sets(graph: &Graph, d: usize) -> LocalitySets {
    let within = |dist: Vec<Option<usize>>| -> Vec<usize> {
        dist.iter()
            .enumerate()
            .filter_map(|(j, h)| h.filter(|&h| h <= d).map(|_| j))
            .collect()
    };
    let n = graph.n_nodes();
    LocalitySets {
        d,
        out_sets: (0..n).map(|i| within(graph.distances_from(i))).collect(),
        in_sets: (0..n).map(|i| within(graph.distances_to(i))).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// `Phi_x` localized to radius `d`.
    PhiX(usize),
    /// `Phi_u` localized to radius `d + 1`; stores `d + 1`.
    PhiU(usize),
    /// Dual multipliers of the polytopic reformulation.
    Xi,
    Custom,
}

/// Entrywise allowed-nonzero pattern for an operator.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityMask {
    pub kind: MaskKind,
    pub pattern: DMatrix<bool>,
}

impl SparsityMask {
    pub fn full(kind: MaskKind, rows: usize, cols: usize) -> Self {
        Self {
            kind,
            pattern: DMatrix::from_element(rows, cols, true),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pattern.shape()
    }

    pub fn allows(&self, r: usize, c: usize) -> bool {
        self.pattern[(r, c)]
    }

    pub fn count(&self) -> usize {
        self.pattern.iter().filter(|&&b| b).count()
    }

    pub fn is_all(&self) -> bool {
        self.pattern.iter().all(|&b| b)
    }

    /// Entrywise `self <= other`.
    pub fn is_subset_of(&self, other: &SparsityMask) -> bool {
        self.shape() == other.shape() && self.pattern.iter().zip(other.pattern.iter()).all(|(&a, &b)| !a || b)
    }
}

/// Locality sets for radii `d` and `d + 1` together with the masks on
/// `Phi_x` (radius `d`) and `Phi_u` (radius `d + 1`) for horizon `T`.
///
/// Masks are spatial only, repeated over every time block; causality is
/// imposed by the operators themselves.
#[derive(Debug, Clone)]
pub struct LocalityMasks {
    pub d: usize,
    pub horizon: usize,
    pub sets: LocalitySets,
    pub sets_next: LocalitySets,
    pub phi_x: SparsityMask,
    pub phi_u: SparsityMask,
}

impl LocalityMasks {
    /// Whether block `(i, j)` of `Phi_x` may be nonzero.
    pub fn x_block(&self, i: usize, j: usize) -> bool {
        self.sets.in_out(i, j)
    }

    pub fn u_block(&self, i: usize, j: usize) -> bool {
        self.sets_next.in_out(i, j)
    }
}

pub fn locality_masks(model: &SystemModel, d: usize, horizon: usize) -> LocalityMasks {
    let sets = d_sets(model.graph(), d);
    let sets_next = d_sets(model.graph(), d + 1);
    let part = model.partition();
    let n = part.n_states();
    let p = part.n_inputs();
    let blocks = horizon + 1;
    let phi_x = DMatrix::from_fn(blocks * n, blocks * n, |r, c| {
        sets.in_out(part.state_owner(r % n), part.state_owner(c % n))
    });
    let phi_u = DMatrix::from_fn(blocks * p, blocks * n, |r, c| {
        sets_next.in_out(part.input_owner(r % p), part.state_owner(c % n))
    });
    LocalityMasks {
        d,
        horizon,
        phi_x: SparsityMask {
            kind: MaskKind::PhiX(d),
            pattern: phi_x,
        },
        phi_u: SparsityMask {
            kind: MaskKind::PhiU(d + 1),
            pattern: phi_u,
        },
        sets,
        sets_next,
    }
}

/// Parameters for the randomized power-grid mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridParams {
    pub rows: usize,
    pub cols: usize,
    pub p_connect: f64,
    pub dt: f64,
    pub seed: u64,
}

impl GridParams {
    pub fn baseline(seed: u64) -> Self {
        Self {
            rows: 4,
            cols: 4,
            p_connect: 0.4,
            dt: 0.2,
            seed,
        }
    }
}

/// A sampled power-grid instance with the physical parameters behind it.
#[derive(Debug, Clone)]
pub struct PowerGrid {
    pub model: SystemModel,
    /// Undirected links `(i, j, k_ij)` with `i < j`.
    pub links: Vec<(usize, usize, f64)>,
    pub inertia_inv: Vec<f64>,
    pub damping: Vec<f64>,
}

/// Uniform draw on `[lo, hi)` from the top 53 bits of one `u64`.
///
/// The conversion is fixed here rather than delegated to a distribution
/// type so instance streams stay stable across library versions.
fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    lo + (hi - lo) * u
}

/// Diagonal and coupling blocks of the discretized swing dynamics.
pub fn swing_blocks(inertia_inv: f64, damping: f64, couplings: &[f64], dt: f64) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let k_total: f64 = couplings.iter().sum();
    let diag = DMatrix::from_row_slice(2, 2, &[1.0, dt, -k_total * inertia_inv * dt, 1.0 - damping * inertia_inv * dt]);
    let off = couplings
        .iter()
        .map(|k| DMatrix::from_row_slice(2, 2, &[0.0, 0.0, k * inertia_inv * dt, 0.0]))
        .collect();
    (diag, off)
}

/// Samples a `rows x cols` mesh of two-state swing subsystems.
///
/// Random stream (ChaCha8 seeded with `seed`): first one draw per potential
/// link, visiting nodes in index order and for each node its right then its
/// down neighbor; then per subsystem in index order `m^-1 ~ U[0,2]` and
/// `d ~ U[0.5,1]`; then per kept link in `(i, j)` lexicographic order
/// `k_ij ~ U[1,1.5]`, shared by both directions.
pub fn generate_power_grid(params: &GridParams) -> Result<PowerGrid> {
    let GridParams {
        rows,
        cols,
        p_connect,
        dt,
        seed,
    } = *params;
    if rows == 0 || cols == 0 {
        return Err(Error::Precondition("grid needs at least one row and column".into()));
    }
    if !(0.0..=1.0).contains(&p_connect) {
        return Err(Error::Precondition(format!("p_connect = {p_connect} outside [0, 1]")));
    }
    if dt <= 0.0 || !dt.is_finite() {
        return Err(Error::Precondition(format!("dt = {dt} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ns = rows * cols;
    let mut pairs = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if c + 1 < cols && uniform(&mut rng, 0.0, 1.0) < p_connect {
                pairs.push((i, i + 1));
            }
            if r + 1 < rows && uniform(&mut rng, 0.0, 1.0) < p_connect {
                pairs.push((i, i + cols));
            }
        }
    }
    pairs.sort_unstable();
    let mut inertia_inv = Vec::with_capacity(ns);
    let mut damping = Vec::with_capacity(ns);
    for _ in 0..ns {
        inertia_inv.push(uniform(&mut rng, 0.0, 2.0));
        damping.push(uniform(&mut rng, 0.5, 1.0));
    }
    let links: Vec<(usize, usize, f64)> = pairs.iter().map(|&(i, j)| (i, j, uniform(&mut rng, 1.0, 1.5))).collect();

    let mut neighbors: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ns];
    for &(i, j, k) in &links {
        neighbors[i].push((j, k));
        neighbors[j].push((i, k));
    }
    let n = 2 * ns;
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, ns);
    for i in 0..ns {
        neighbors[i].sort_by_key(|e| e.0);
        let ks: Vec<f64> = neighbors[i].iter().map(|e| e.1).collect();
        let (diag, off) = swing_blocks(inertia_inv[i], damping[i], &ks, dt);
        a.view_mut((2 * i, 2 * i), (2, 2)).copy_from(&diag);
        for ((j, _), blk) in neighbors[i].iter().zip(off) {
            a.view_mut((2 * i, 2 * j), (2, 2)).copy_from(&blk);
        }
        b[(2 * i + 1, i)] = 1.0;
    }
    let model = SystemModel::new(a, b, Partition::uniform(ns, 2, 1)?)?;
    Ok(PowerGrid {
        model,
        links,
        inertia_inv,
        damping,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> SystemModel {
        // 1 -> 2 -> 3 (0-based 0 -> 1 -> 2), scalar subsystems.
        let a = DMatrix::from_row_slice(3, 3, &[0.5, 0.0, 0.0, 1.0, 0.5, 0.0, 0.0, 1.0, 0.5]);
        let b = DMatrix::identity(3, 3);
        SystemModel::new(a, b, Partition::uniform(3, 1, 1).unwrap()).unwrap()
    }

    #[test]
    fn decoupled_system_has_only_self_loops() {
        let a = DMatrix::from_row_slice(4, 4, &[1., 2., 0., 0., 3., 4., 0., 0., 0., 0., 5., 6., 0., 0., 7., 8.]);
        let b = DMatrix::from_row_slice(4, 2, &[1., 0., 0., 0., 0., 0., 0., 1.]);
        let g = derive_graph(&a, &b, &Partition::uniform(2, 2, 1).unwrap()).unwrap();
        assert_eq!(g.edges(), vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn directed_coupling_gives_single_edge() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let b = DMatrix::zeros(2, 2);
        let g = derive_graph(&a, &b, &Partition::uniform(2, 1, 1).unwrap()).unwrap();
        assert_eq!(g.edges(), vec![(0, 1)]);
    }

    #[test]
    fn derive_graph_rejects_bad_partition() {
        let a = DMatrix::zeros(3, 3);
        let b = DMatrix::zeros(3, 1);
        assert!(matches!(
            derive_graph(&a, &b, &Partition::uniform(2, 1, 1).unwrap()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_radius_sets_are_singletons() {
        let s = d_sets(path3().graph(), 0);
        for i in 0..3 {
            assert_eq!(s.out_sets[i], vec![i]);
            assert_eq!(s.in_sets[i], vec![i]);
        }
    }

    #[test]
    fn path_sets_radius_one() {
        let s = d_sets(path3().graph(), 1);
        assert_eq!(s.out_sets[0], vec![0, 1]);
        assert_eq!(s.in_sets[2], vec![1, 2]);
    }

    #[test]
    fn path_masks_radius_one() {
        let m = path3();
        let masks = locality_masks(&m, 1, 2);
        // [Phi_x]_{31}: row of subsystem 3 (index 2), column of subsystem 1 (index 0).
        assert!(!masks.phi_x.allows(2, 0));
        assert!(masks.phi_u.allows(2, 0));
        // BFS oracle: dist(0 -> 2) = 2.
        assert_eq!(m.graph().distance(0, 2), Some(2));
    }

    #[test]
    fn decoupled_zero_radius_mask_is_block_diagonal() {
        let grid = generate_power_grid(&GridParams {
            rows: 2,
            cols: 2,
            p_connect: 0.0,
            dt: 0.2,
            seed: 1,
        })
        .unwrap();
        let masks = locality_masks(&grid.model, 0, 1);
        let n = 8;
        for r in 0..n {
            for c in 0..n {
                assert_eq!(masks.phi_x.allows(r, c), r / 2 == c / 2);
            }
        }
    }

    #[test]
    fn swing_substitution() {
        let (diag, off) = swing_blocks(1.0, 0.75, &[1.25, 1.25], 0.2);
        let expect = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.5, 0.85]);
        assert!((diag - expect).abs().max() < 1e-15);
        assert!((off[0][(1, 0)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn baseline_dimensions() {
        let g = generate_power_grid(&GridParams::baseline(0)).unwrap();
        assert_eq!(g.model.n_subsystems(), 16);
        assert_eq!(g.model.n_states(), 32);
        assert_eq!(g.model.n_inputs(), 16);
    }

    #[test]
    fn no_links_means_decoupled() {
        let g = generate_power_grid(&GridParams {
            p_connect: 0.0,
            ..GridParams::baseline(3)
        })
        .unwrap();
        let a = g.model.a();
        for i in 0..16 {
            for j in 0..16 {
                if i != j {
                    assert!(a.view((2 * i, 2 * j), (2, 2)).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn generator_rejects_bad_inputs() {
        assert!(generate_power_grid(&GridParams { rows: 0, ..GridParams::baseline(0) }).is_err());
        assert!(generate_power_grid(&GridParams { p_connect: 1.5, ..GridParams::baseline(0) }).is_err());
        assert!(generate_power_grid(&GridParams { dt: 0.0, ..GridParams::baseline(0) }).is_err());
    }

    #[test]
    fn model_text_round_trip() {
        let g = generate_power_grid(&GridParams::baseline(7)).unwrap();
        let text = g.model.to_text();
        let back = SystemModel::from_text(&text).unwrap();
        assert_eq!(back, g.model);
        assert_eq!(back.to_text(), text);
    }
}
