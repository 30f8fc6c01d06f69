//! Message passing between subsystem workers and closed-loop simulation.
//!
//! Every exchange of data between subsystems goes through [`exchange`],
//! which rejects any message whose sender and receiver are farther apart
//! than the phase allows and, through a caller-supplied audit, any payload
//! entry the sender does not own or the receiver may not see.

use std::sync::Arc;

use nalgebra::DVector;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::constraints::{BoxBounds, LocalNorm, Polytope};
use crate::error::{Error, Hops, Result};
use crate::model::{Graph, SystemModel};
use crate::oracle::polytope_vertices;
use crate::textfmt::fmt_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    /// Initial-state measurements, column owner to row owner.
    StateShare,
    /// Row-copy values, row owner to column owner.
    RowShare,
    /// Column-copy values, column owner to row owner.
    ColShare,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::StateShare, Phase::RowShare, Phase::ColShare];

    fn index(self) -> usize {
        match self {
            Phase::StateShare => 0,
            Phase::RowShare => 1,
            Phase::ColShare => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Message {
    pub sender: usize,
    pub receiver: usize,
    pub phase: Phase,
    pub iteration: usize,
    /// Global identifiers of the payload entries.
    pub entries: Arc<[usize]>,
    pub payload: Vec<f64>,
}

/// Hop distances and the per-phase radius.
///
/// State and column shares flow along the graph (`receiver` must lie in the
/// sender's outgoing set); row shares flow against it (`receiver` must lie in
/// the sender's incoming set).
#[derive(Debug, Clone)]
pub struct Topology {
    dist: Vec<Vec<Option<usize>>>,
    radius: usize,
}

impl Topology {
    pub fn new(graph: &Graph, radius: usize) -> Self {
        Self {
            dist: (0..graph.n_nodes()).map(|i| graph.distances_from(i)).collect(),
            radius,
        }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn n_nodes(&self) -> usize {
        self.dist.len()
    }

    /// `dist(from -> to)`.
    pub fn hops(&self, from: usize, to: usize) -> Hops {
        match self.dist[from][to] {
            Some(h) => Hops::Finite(h),
            None => Hops::Unreachable,
        }
    }

    /// Directed hop count that the phase rule measures.
    pub fn phase_hops(&self, phase: Phase, sender: usize, receiver: usize) -> Hops {
        match phase {
            Phase::StateShare | Phase::ColShare => self.hops(sender, receiver),
            Phase::RowShare => self.hops(receiver, sender),
        }
    }

    pub fn check(&self, phase: Phase, sender: usize, receiver: usize) -> Result<()> {
        let n = self.n_nodes();
        if sender >= n || receiver >= n {
            return Err(Error::dim(format!("message {sender} -> {receiver} names an unknown subsystem")));
        }
        let hops = self.phase_hops(phase, sender, receiver);
        match hops {
            Hops::Finite(h) if h <= self.radius => Ok(()),
            _ => Err(Error::Topology {
                phase,
                sender,
                receiver,
                hops,
                limit: self.radius,
            }),
        }
    }
}

/// Message and entry counts per phase.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommStats {
    pub messages: [u64; 3],
    pub entries: [u64; 3],
    pub max_hops: [usize; 3],
}

impl CommStats {
    pub fn messages(&self, phase: Phase) -> u64 {
        self.messages[phase.index()]
    }

    pub fn entries(&self, phase: Phase) -> u64 {
        self.entries[phase.index()]
    }

    pub fn max_hops(&self, phase: Phase) -> usize {
        self.max_hops[phase.index()]
    }

    pub fn merge(&mut self, other: &CommStats) {
        for k in 0..3 {
            self.messages[k] += other.messages[k];
            self.entries[k] += other.entries[k];
            self.max_hops[k] = self.max_hops[k].max(other.max_hops[k]);
        }
    }
}

/// Validates and delivers one barrier's worth of messages. Returns them
/// sorted by `(receiver, sender)` so delivery order never depends on how the
/// senders were scheduled.
pub fn exchange(
    mut messages: Vec<Message>,
    topology: &Topology,
    audit: &dyn Fn(&Message) -> Result<()>,
    stats: &mut CommStats,
) -> Result<Vec<Message>> {
    for m in &messages {
        topology.check(m.phase, m.sender, m.receiver)?;
        if m.entries.len() != m.payload.len() {
            return Err(Error::dim(format!(
                "message {} -> {} carries {} values for {} entries",
                m.sender,
                m.receiver,
                m.payload.len(),
                m.entries.len()
            )));
        }
        audit(m)?;
        let k = m.phase.index();
        stats.messages[k] += 1;
        stats.entries[k] += m.entries.len() as u64;
        if let Hops::Finite(h) = topology.phase_hops(m.phase, m.sender, m.receiver) {
            stats.max_hops[k] = stats.max_hops[k].max(h);
        }
    }
    messages.sort_by_key(|m| (m.receiver, m.sender));
    Ok(messages)
}

/// Anything that maps a measured state to the input applied this step.
pub trait Controller {
    fn control(&mut self, x: &DVector<f64>) -> Result<DVector<f64>>;
}

impl<F: FnMut(&DVector<f64>) -> Result<DVector<f64>>> Controller for F {
    fn control(&mut self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self(x)
    }
}

/// Per-step disturbance models.
#[derive(Debug, Clone)]
pub enum NoiseKind {
    Zero,
    /// Uniform per coordinate, rescaled so every subsystem block has
    /// `||[delta]_i||_p <= sigma`.
    UniformLocal { norm: LocalNorm, sigma: f64 },
    /// Uniform over a per-step polytope (dimension `n`).
    UniformPolytope(Polytope),
    /// A vertex of each polytope block chosen to push the state outward.
    VertexAdversarial(Polytope),
}

/// Seeded disturbance source.
pub struct NoiseGen {
    kind: NoiseKind,
    groups: Vec<std::ops::Range<usize>>,
    vertices: Vec<Vec<DVector<f64>>>,
    n: usize,
    rng: ChaCha8Rng,
}

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Restriction of a horizon-long polytope to its first time step.
pub fn first_step_polytope(poly: &Polytope, n: usize) -> Polytope {
    Polytope {
        dim: n,
        blocks: poly.blocks.iter().filter(|b| b.cols.iter().all(|&c| c < n)).cloned().collect(),
    }
}

impl NoiseGen {
    pub fn new(kind: NoiseKind, model: &SystemModel, seed: u64) -> Result<Self> {
        let n = model.n_states();
        let part = model.partition();
        let groups = (0..part.n_subsystems()).map(|i| part.state_range(i)).collect();
        let mut vertices = Vec::new();
        match &kind {
            NoiseKind::Zero => {}
            NoiseKind::UniformLocal { sigma, .. } => {
                if !(sigma.is_finite() && *sigma >= 0.0) {
                    return Err(Error::Precondition(format!("sigma must be finite and nonnegative, got {sigma}")));
                }
            }
            NoiseKind::UniformPolytope(p) | NoiseKind::VertexAdversarial(p) => {
                if p.dim != n {
                    return Err(Error::dim(format!("per-step polytope has dimension {}, expected {n}", p.dim)));
                }
                p.validate()?;
                for b in &p.blocks {
                    let v = polytope_vertices(&b.g_mat, &b.g_vec);
                    if v.is_empty() {
                        return Err(Error::Precondition("polytope block is empty or unbounded".into()));
                    }
                    vertices.push(v);
                }
            }
        }
        Ok(Self {
            kind,
            groups,
            vertices,
            n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn kind(&self) -> &NoiseKind {
        &self.kind
    }

    /// Next disturbance; `x` is the current state (used by the adversary).
    pub fn sample(&mut self, x: &DVector<f64>) -> DVector<f64> {
        let mut d = DVector::zeros(self.n);
        match &self.kind {
            NoiseKind::Zero => {}
            NoiseKind::UniformLocal { norm, sigma } => {
                for k in 0..self.n {
                    d[k] = sigma * (2.0 * unit(&mut self.rng) - 1.0);
                }
                for g in &self.groups {
                    let nrm = norm.primal(&d.as_slice()[g.clone()]);
                    if nrm > *sigma {
                        let s = sigma / nrm;
                        for k in g.clone() {
                            d[k] *= s;
                        }
                    }
                }
            }
            NoiseKind::UniformPolytope(p) => {
                for (b, verts) in p.blocks.iter().zip(&self.vertices) {
                    let m = b.cols.len();
                    let lo: Vec<f64> = (0..m).map(|j| verts.iter().map(|v| v[j]).fold(f64::INFINITY, f64::min)).collect();
                    let hi: Vec<f64> = (0..m).map(|j| verts.iter().map(|v| v[j]).fold(f64::NEG_INFINITY, f64::max)).collect();
                    let mut pick = None;
                    for _ in 0..64 {
                        let cand = DVector::from_fn(m, |j, _| lo[j] + (hi[j] - lo[j]) * unit(&mut self.rng));
                        if (&b.g_mat * &cand - &b.g_vec).iter().all(|&r| r <= 1e-12) {
                            pick = Some(cand);
                            break;
                        }
                    }
                    let v = pick.unwrap_or_else(|| {
                        // Random convex combination of the vertices.
                        let w: Vec<f64> = verts.iter().map(|_| unit(&mut self.rng) + 1e-12).collect();
                        let total: f64 = w.iter().sum();
                        verts.iter().zip(&w).fold(DVector::zeros(m), |acc, (v, wi)| acc + v * (wi / total))
                    });
                    for (j, &c) in b.cols.iter().enumerate() {
                        d[c] = v[j];
                    }
                }
            }
            NoiseKind::VertexAdversarial(p) => {
                for (b, verts) in p.blocks.iter().zip(&self.vertices) {
                    let score = |v: &DVector<f64>| b.cols.iter().enumerate().map(|(j, &c)| v[j] * x[c]).sum::<f64>();
                    let best = verts.iter().map(score).fold(f64::NEG_INFINITY, f64::max);
                    let ties: Vec<&DVector<f64>> = verts.iter().filter(|v| score(v) >= best - 1e-12).collect();
                    let v = ties[(self.rng.next_u64() % ties.len() as u64) as usize];
                    for (j, &c) in b.cols.iter().enumerate() {
                        d[c] = v[j];
                    }
                }
            }
        }
        d
    }
}

/// Closed-loop record: `x[tau]` for `tau = 0..=steps`, `u[tau]` and
/// `w[tau]` for `tau = 0..steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub w: Vec<DVector<f64>>,
}

impl Trajectory {
    pub const HEADER: &'static str = "tau,subsystem,state_index,x,u,w";

    pub fn steps(&self) -> usize {
        self.u.len()
    }

    /// One row per step and state; `u` holds the subsystem's input with the
    /// same local index when there is one.
    pub fn to_csv(&self, model: &SystemModel) -> String {
        let part = model.partition();
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for (tau, x) in self.x.iter().enumerate() {
            for i in 0..part.n_subsystems() {
                let inputs = part.input_range(i);
                for (li, k) in part.state_range(i).enumerate() {
                    let u = self
                        .u
                        .get(tau)
                        .filter(|_| li < inputs.len())
                        .map(|u| fmt_f64(u[inputs.start + li]))
                        .unwrap_or_default();
                    let w = self.w.get(tau).map(|w| fmt_f64(w[k])).unwrap_or_default();
                    out.push_str(&format!("{tau},{i},{li},{},{u},{w}\n", fmt_f64(x[k])));
                }
            }
        }
        out
    }

    /// Bound violations of `x[1..]` and `u` beyond `tol`.
    pub fn violations(&self, bounds: &BoxBounds, tol: f64) -> usize {
        let over = |v: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>| {
            v.iter().zip(lo.iter().zip(hi.iter())).filter(|(x, (l, h))| **x > **h + tol || **x < **l - tol).count()
        };
        self.x.iter().skip(1).map(|x| over(x, &bounds.x_lo, &bounds.x_hi)).sum::<usize>()
            + self.u.iter().map(|u| over(u, &bounds.u_lo, &bounds.u_hi)).sum::<usize>()
    }

    /// Largest amount by which any `x[1..]` or `u` entry leaves its bounds
    /// (zero when all are inside).
    pub fn max_violation(&self, bounds: &BoxBounds) -> f64 {
        let worst = |v: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>| {
            v.iter().zip(lo.iter().zip(hi.iter())).map(|(x, (l, h))| (x - h).max(l - x)).fold(0.0, f64::max)
        };
        let xs = self.x.iter().skip(1).map(|x| worst(x, &bounds.x_lo, &bounds.x_hi));
        let us = self.u.iter().map(|u| worst(u, &bounds.u_lo, &bounds.u_hi));
        xs.chain(us).fold(0.0, f64::max)
    }

    /// Largest entrywise state gap to another trajectory.
    pub fn max_state_gap(&self, other: &Trajectory) -> f64 {
        self.x.iter().zip(&other.x).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max)
    }
}

/// Simulates `x+ = A x + B u + delta` for `steps` steps. Controller errors
/// are reported with the step at which they occurred.
pub fn run_closed_loop(
    model: &SystemModel,
    controller: &mut dyn Controller,
    x0: &DVector<f64>,
    noise: &mut NoiseGen,
    steps: usize,
) -> Result<Trajectory> {
    if x0.len() != model.n_states() {
        return Err(Error::dim("x0 does not match the model"));
    }
    let mut traj = Trajectory {
        x: vec![x0.clone()],
        u: Vec::with_capacity(steps),
        w: Vec::with_capacity(steps),
    };
    let mut x = x0.clone();
    for tau in 0..steps {
        let u = controller.control(&x).map_err(|e| e.at_step(tau))?;
        if u.len() != model.n_inputs() {
            return Err(Error::dim("controller returned an input of the wrong size").at_step(tau));
        }
        let w = noise.sample(&x);
        x = model.a() * &x + model.b() * &u + &w;
        traj.u.push(u);
        traj.w.push(w);
        traj.x.push(x.clone());
    }
    Ok(traj)
}
