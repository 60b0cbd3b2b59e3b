//! Quantum state machines: colored multigraphs of click / no-click transition
//! amplitudes over a chosen orthonormal basis, their coarse-graining into
//! semiclassical block graphs, and route planning on the result.
//!
//! Amplitude matrices are stored as `m[(to, from)]`, so the click amplitude
//! for the edge `a -> b` of coupling `V` is `<b| dt V |a>`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt::Write as _;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::couplings::CouplingFamily;
use crate::hilbert::ops::c;
use crate::hilbert::{hermitian_eigen, CMatrix, CVector, HilbertError, QuditRegister};
use crate::policies::DEFAULT_STAGE_BUDGET;

/// Relative zero-amplitude threshold (times `dt * max |V|`).
pub const EDGE_THRESHOLD: f64 = 1e-12;

pub const ORTHONORMAL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QsmError {
    #[error("target state is not a basis vector")]
    TargetNotInBasis,

    #[error("basis is not orthonormal (Gram deviation {0:e})")]
    NotOrthonormal(f64),

    #[error("basis must have {expected} vectors of length {expected}, got {got}")]
    IncompleteBasis { expected: usize, got: usize },

    #[error("no-click rule violated: {}", .0.join("; "))]
    RuleViolation(Vec<String>),

    #[error("coarse graph is not semiclassical: {}", .0.join("; "))]
    NotSemiclassical(Vec<String>),

    #[error("block {to} is unreachable from block {from}")]
    Unreachable { from: usize, to: usize },

    #[error("block index {0} out of range")]
    UnknownBlock(usize),

    #[error("family has no fixed members")]
    GeneratedFamily,

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Hilbert(#[from] HilbertError),
}

pub type QsmResult<T> = Result<T, QsmError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeReadout {
    Cl,
    Ncl,
}

/// Labeled orthonormal basis.
#[derive(Clone, Debug, PartialEq)]
pub struct Basis {
    pub labels: Vec<String>,
    pub vectors: Vec<CVector>,
}

impl Basis {
    pub fn new(labels: Vec<String>, vectors: Vec<CVector>) -> QsmResult<Self> {
        let n = vectors.len();
        if labels.len() != n {
            return Err(QsmError::Invalid(format!("{} labels for {} vectors", labels.len(), n)));
        }
        if vectors.iter().any(|v| v.len() != n) {
            return Err(QsmError::IncompleteBasis { expected: vectors.first().map_or(0, |v| v.len()), got: n });
        }
        let mut dev: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let g = vectors[i].dotc(&vectors[j]);
                let e = if i == j { c(1.0) } else { c(0.0) };
                dev = dev.max((g - e).norm());
            }
        }
        if dev > ORTHONORMAL_TOL {
            return Err(QsmError::NotOrthonormal(dev));
        }
        Ok(Self { labels, vectors })
    }

    /// Standard basis with labels `0..n`.
    pub fn standard(n: usize) -> Self {
        let vectors = (0..n)
            .map(|i| {
                let mut v = CVector::zeros(n);
                v[i] = c(1.0);
                v
            })
            .collect();
        Self { labels: (0..n).map(|i| i.to_string()).collect(), vectors }
    }

    /// Computational basis of a register, labeled by per-site levels (site 0 first).
    pub fn computational(register: &QuditRegister) -> Self {
        let mut b = Self::standard(register.total_dim());
        b.labels = (0..register.total_dim())
            .map(|i| register.digits(i).iter().map(|d| d.to_string()).collect())
            .collect();
        b
    }

    pub fn len(&self) -> usize { self.vectors.len() }

    pub fn is_empty(&self) -> bool { self.vectors.is_empty() }

    /// Columns are the basis vectors.
    pub fn matrix(&self) -> CMatrix { CMatrix::from_columns(&self.vectors) }
}

/// Basis for the three-qubit W family: computational states outside the
/// single-excitation sector, and `|W>`, `(|100>-|001>)/sqrt 2`,
/// `(|100>-2|010>+|001>)/sqrt 6` inside it (labels are `ABC`).
pub fn w_basis() -> Basis {
    let r = QuditRegister::qubits(3).expect("three qubits");
    let ket = |a: usize, b: usize, cc: usize| {
        let mut v = CVector::zeros(8);
        v[r.index_of(&[a, b, cc])] = c(1.0);
        v
    };
    let s2 = 2f64.sqrt();
    let s3 = 3f64.sqrt();
    let s6 = 6f64.sqrt();
    let w = (ket(1, 0, 0) + ket(0, 1, 0) + ket(0, 0, 1)).unscale(s3);
    let phi_m = (ket(1, 0, 0) - ket(0, 0, 1)).unscale(s2);
    let phi_pm = (ket(1, 0, 0) - ket(0, 1, 0) * c(2.0) + ket(0, 0, 1)).unscale(s6);
    let entries = vec![
        ("000", ket(0, 0, 0)),
        ("W", w),
        ("phi-", phi_m),
        ("phi+-", phi_pm),
        ("110", ket(1, 1, 0)),
        ("101", ket(1, 0, 1)),
        ("011", ket(0, 1, 1)),
        ("111", ket(1, 1, 1)),
    ];
    let (labels, vectors) = entries.into_iter().map(|(l, v)| (l.to_string(), v)).unzip();
    Basis::new(labels, vectors).expect("orthonormal by construction")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    /// Index into `coupling_ids`.
    pub coupling: usize,
    pub readout: EdgeReadout,
    #[serde(with = "complex_pair")]
    pub amplitude: C64,
}

mod complex_pair {
    use num_complex::Complex64 as C64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(z: &C64, s: S) -> Result<S::Ok, S::Error> { [z.re, z.im].serialize(s) }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<C64, D::Error> {
        let [re, im] = <[f64; 2]>::deserialize(d)?;
        Ok(C64::new(re, im))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringMultigraph {
    pub labels: Vec<String>,
    pub coupling_ids: Vec<String>,
    pub target: usize,
    pub dt: f64,
    pub edges: Vec<Edge>,
}

impl SteeringMultigraph {
    pub fn n_vertices(&self) -> usize { self.labels.len() }

    pub fn edges_of(&self, coupling: usize, readout: EdgeReadout) -> impl Iterator<Item = &Edge> + '_ {
        self.edges.iter().filter(move |e| e.coupling == coupling && e.readout == readout)
    }

    /// Amplitude matrix `m[(to, from)]` rebuilt from the edge list.
    pub fn amplitude_matrix(&self, coupling: usize, readout: EdgeReadout) -> CMatrix {
        let n = self.n_vertices();
        let mut m = CMatrix::zeros(n, n);
        for e in self.edges_of(coupling, readout) {
            m[(e.to, e.from)] = e.amplitude;
        }
        m
    }

    pub fn coupling_index(&self, id: &str) -> Option<usize> { self.coupling_ids.iter().position(|c| c == id) }

    pub fn to_json(&self) -> String { serde_json::to_string_pretty(self).expect("graph serializes") }
}

/// Build the multigraph for `(id, full matrix)` couplings in `basis`.
pub fn build_steering_graph_from_operators(
    couplings: &[(String, CMatrix)],
    basis: &Basis,
    target: &CVector,
    dt: f64,
) -> QsmResult<SteeringMultigraph> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(QsmError::Invalid(format!("dt must be positive, got {dt}")));
    }
    let n = basis.len();
    if target.len() != n {
        return Err(QsmError::IncompleteBasis { expected: target.len(), got: n });
    }
    let tn = target.norm();
    let target_idx = basis
        .vectors
        .iter()
        .position(|b| (b.dotc(target).norm() - tn).abs() < 1e-10 * tn.max(1.0))
        .ok_or(QsmError::TargetNotInBasis)?;
    let b = basis.matrix();
    let bh = b.adjoint();
    let mut max_norm: f64 = 0.0;
    let mut mats = Vec::with_capacity(couplings.len());
    for (_, v) in couplings {
        if v.shape() != (n, n) {
            return Err(QsmError::Invalid(format!("coupling of shape {:?} for a {n}-dimensional basis", v.shape())));
        }
        let vdv = v.adjoint() * v;
        max_norm = max_norm.max(hermitian_eigen(&vdv).0.last().copied().unwrap_or(0.0).max(0.0).sqrt());
        let cl = &bh * v * &b * c(dt);
        let ncl = CMatrix::identity(n, n) - &bh * vdv * &b * c(0.5 * dt * dt);
        mats.push((cl, ncl));
    }
    let thr = EDGE_THRESHOLD * dt * max_norm;
    let mut edges = Vec::new();
    for (k, (cl, ncl)) in mats.iter().enumerate() {
        for (readout, m) in [(EdgeReadout::Cl, cl), (EdgeReadout::Ncl, ncl)] {
            for from in 0..n {
                for to in 0..n {
                    let a = m[(to, from)];
                    if a.norm() > thr && a.norm() > 0.0 {
                        edges.push(Edge { from, to, coupling: k, readout, amplitude: a });
                    }
                }
            }
        }
    }
    Ok(SteeringMultigraph {
        labels: basis.labels.clone(),
        coupling_ids: couplings.iter().map(|(id, _)| id.clone()).collect(),
        target: target_idx,
        dt,
        edges,
    })
}

pub fn build_steering_graph(family: &CouplingFamily, basis: &Basis, dt: f64) -> QsmResult<SteeringMultigraph> {
    let members = family.members().ok_or(QsmError::GeneratedFamily)?;
    let ops: Vec<(String, CMatrix)> = members.iter().map(|m| (m.id().to_string(), m.full_matrix())).collect();
    build_steering_graph_from_operators(&ops, basis, family.target.amplitudes(), dt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoClickReport {
    /// `(coupling, from, to, witness)` for every inter-vertex no-click edge.
    pub witnesses: Vec<(usize, usize, usize, usize)>,
}

/// Check that each inter-vertex no-click edge `a -> b` has click edges
/// `a -> m` and `b -> m`, and that the no-click amplitudes equal
/// `delta_ab - (1/2) sum_m conj(L_mb) L_ma` built from the click edges.
pub fn verify_noclick_rule(graph: &SteeringMultigraph) -> QsmResult<NoClickReport> {
    let n = graph.n_vertices();
    let mut problems = Vec::new();
    let mut witnesses = Vec::new();
    for k in 0..graph.coupling_ids.len() {
        let cl = graph.amplitude_matrix(k, EdgeReadout::Cl);
        let ncl = graph.amplitude_matrix(k, EdgeReadout::Ncl);
        let rebuilt = CMatrix::identity(n, n) - cl.adjoint() * &cl * c(0.5);
        let scale = 1e-9 * graph.dt * graph.dt;
        for a in 0..n {
            for b in 0..n {
                if (rebuilt[(b, a)] - ncl[(b, a)]).norm() > scale.max(1e-12) {
                    problems.push(format!(
                        "{} ncl {}->{}: amplitude {:.3e} vs {:.3e} from click edges",
                        graph.coupling_ids[k], a, b, ncl[(b, a)], rebuilt[(b, a)]
                    ));
                }
                if a == b || ncl[(b, a)] == c(0.0) {
                    continue;
                }
                match (0..n).find(|&m| cl[(m, a)] != c(0.0) && cl[(m, b)] != c(0.0)) {
                    Some(m) => witnesses.push((k, a, b, m)),
                    None => problems.push(format!("{} ncl {}->{} has no click witness", graph.coupling_ids[k], a, b)),
                }
            }
        }
    }
    if problems.is_empty() {
        Ok(NoClickReport { witnesses })
    } else {
        Err(QsmError::RuleViolation(problems))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubgraphKind {
    Superposition,
    Interference,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantumSubgraph {
    pub coupling: usize,
    pub readout: EdgeReadout,
    pub vertex: usize,
    pub kind: SubgraphKind,
}

/// Vertices with more than one outgoing (superposition) or incoming
/// (interference) edge of a single color; no-click self-loops are ignored.
pub fn detect_quantum_subgraphs(graph: &SteeringMultigraph) -> Vec<QuantumSubgraph> {
    let n = graph.n_vertices();
    let mut out = Vec::new();
    for k in 0..graph.coupling_ids.len() {
        for readout in [EdgeReadout::Cl, EdgeReadout::Ncl] {
            let mut outdeg = vec![0usize; n];
            let mut indeg = vec![0usize; n];
            for e in graph.edges_of(k, readout) {
                if readout == EdgeReadout::Ncl && e.from == e.to {
                    continue;
                }
                outdeg[e.from] += 1;
                indeg[e.to] += 1;
            }
            for v in 0..n {
                if outdeg[v] > 1 {
                    out.push(QuantumSubgraph { coupling: k, readout, vertex: v, kind: SubgraphKind::Superposition });
                }
                if indeg[v] > 1 {
                    out.push(QuantumSubgraph { coupling: k, readout, vertex: v, kind: SubgraphKind::Interference });
                }
            }
        }
    }
    out
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self { Self((0..n).collect()) }

    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.0[hi] = lo;
        true
    }
}

/// Grouping rule to a fixed point: for each color and block, all blocks
/// reached by its outgoing edges are merged, and likewise for incoming edges.
/// Edges are `(from, to, color)`; the caller drops no-click self-loops.
fn merge_to_fixed_point(n: usize, edges: &[(usize, usize, usize)]) -> Vec<usize> {
    let mut uf = UnionFind::new(n);
    loop {
        let mut changed = false;
        let mut outs: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
        let mut ins: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
        for &(from, to, color) in edges {
            let (bf, bt) = (uf.find(from), uf.find(to));
            outs.entry((color, bf)).or_default().insert(bt);
            ins.entry((color, bt)).or_default().insert(bf);
        }
        for set in outs.values().chain(ins.values()) {
            let mut it = set.iter();
            if let Some(&first) = it.next() {
                for &other in it {
                    changed |= uf.union(first, other);
                }
            }
        }
        if !changed {
            break;
        }
    }
    (0..n).map(|v| uf.find(v)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseEdge {
    pub from: usize,
    pub to: usize,
    pub coupling: usize,
    pub readout: EdgeReadout,
    /// Operator norm of the inter-block amplitude submatrix.
    pub amplitude: f64,
    pub traversal_time: f64,
    /// Some source state of `from` has no amplitude along this edge.
    pub zero_row: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ancillary {
    pub coupling: usize,
    /// Norm of the intra-block click submatrix and its dwell time.
    pub amplitude: f64,
    pub dwell_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseQSM {
    /// Member vertices of each block, sorted; blocks ordered by first member.
    pub blocks: Vec<Vec<usize>>,
    pub target_block: usize,
    pub coupling_ids: Vec<String>,
    /// Inter-block edges, one per (from, to, coupling, readout).
    pub edges: Vec<CoarseEdge>,
    pub ancillary: Vec<Vec<Ancillary>>,
}

impl CoarseQSM {
    pub fn block_of(&self, vertex: usize) -> Option<usize> { self.blocks.iter().position(|b| b.contains(&vertex)) }

    pub fn to_json(&self) -> String { serde_json::to_string_pretty(self).expect("coarse graph serializes") }

    /// Block-level edge list, with ancillary couplings as click self-loops.
    fn block_edges(&self) -> Vec<(usize, usize, usize)> {
        let n_colors = self.coupling_ids.len();
        let color = |k: usize, r: EdgeReadout| if r == EdgeReadout::Cl { k } else { k + n_colors };
        let mut e: Vec<_> = self.edges.iter().map(|x| (x.from, x.to, color(x.coupling, x.readout))).collect();
        for (b, anc) in self.ancillary.iter().enumerate() {
            e.extend(anc.iter().map(|a| (b, b, color(a.coupling, EdgeReadout::Cl))));
        }
        e
    }

    /// True when grouping the block graph again merges nothing.
    pub fn is_fixed_point(&self) -> bool {
        let roots = merge_to_fixed_point(self.blocks.len(), &self.block_edges());
        roots.iter().enumerate().all(|(i, &r)| i == r)
    }
}

fn operator_norm(m: &CMatrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    hermitian_eigen(&(m.adjoint() * m)).0.last().copied().unwrap_or(0.0).max(0.0).sqrt()
}

pub fn coarse_grain(graph: &SteeringMultigraph) -> CoarseQSM {
    let n = graph.n_vertices();
    let n_colors = graph.coupling_ids.len();
    let raw: Vec<(usize, usize, usize)> = graph
        .edges
        .iter()
        .filter(|e| !(e.readout == EdgeReadout::Ncl && e.from == e.to))
        .map(|e| (e.from, e.to, if e.readout == EdgeReadout::Cl { e.coupling } else { e.coupling + n_colors }))
        .collect();
    let roots = merge_to_fixed_point(n, &raw);
    let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (v, &r) in roots.iter().enumerate() {
        by_root.entry(r).or_default().push(v);
    }
    let blocks: Vec<Vec<usize>> = by_root.into_values().collect();
    let mut block_of = vec![0; n];
    for (b, members) in blocks.iter().enumerate() {
        for &v in members {
            block_of[v] = b;
        }
    }
    let sub = |m: &CMatrix, to: &[usize], from: &[usize]| {
        CMatrix::from_fn(to.len(), from.len(), |i, j| m[(to[i], from[j])])
    };
    let mut pairs: BTreeSet<(usize, usize, usize, EdgeReadout)> = BTreeSet::new();
    let mut intra: BTreeSet<(usize, usize)> = BTreeSet::new();
    for e in &graph.edges {
        let (bf, bt) = (block_of[e.from], block_of[e.to]);
        if bf != bt {
            pairs.insert((bf, bt, e.coupling, e.readout));
        } else if e.readout == EdgeReadout::Cl {
            intra.insert((bf, e.coupling));
        }
    }
    let mats: Vec<[CMatrix; 2]> = (0..n_colors)
        .map(|k| [graph.amplitude_matrix(k, EdgeReadout::Cl), graph.amplitude_matrix(k, EdgeReadout::Ncl)])
        .collect();
    let edges = pairs
        .into_iter()
        .map(|(bf, bt, k, r)| {
            let m = &mats[k][if r == EdgeReadout::Cl { 0 } else { 1 }];
            let s = sub(m, &blocks[bt], &blocks[bf]);
            let amplitude = operator_norm(&s);
            let zero_row = (0..s.ncols()).any(|j| s.column(j).iter().all(|z| *z == c(0.0)));
            CoarseEdge { from: bf, to: bt, coupling: k, readout: r, amplitude, traversal_time: amplitude.powi(-2), zero_row }
        })
        .collect();
    let mut ancillary = vec![Vec::new(); blocks.len()];
    for (b, k) in intra {
        let s = sub(&mats[k][0], &blocks[b], &blocks[b]);
        let amplitude = operator_norm(&s);
        ancillary[b].push(Ancillary { coupling: k, amplitude, dwell_time: amplitude.powi(-2) });
    }
    CoarseQSM { target_block: block_of[graph.target], blocks, coupling_ids: graph.coupling_ids.clone(), edges, ancillary }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemiclassicalReport {
    pub n_blocks: usize,
    /// Edges whose source block relies on ancillary mixing.
    pub mixing_required: Vec<(usize, usize, String)>,
}

/// Block-level degree check and the zero-row / ancillary requirement.
pub fn assert_semiclassical(coarse: &CoarseQSM) -> QsmResult<SemiclassicalReport> {
    let mut problems = Vec::new();
    let mut outs: BTreeMap<(usize, EdgeReadout, usize), BTreeSet<usize>> = BTreeMap::new();
    let mut ins: BTreeMap<(usize, EdgeReadout, usize), BTreeSet<usize>> = BTreeMap::new();
    for e in &coarse.edges {
        outs.entry((e.coupling, e.readout, e.from)).or_default().insert(e.to);
        ins.entry((e.coupling, e.readout, e.to)).or_default().insert(e.from);
    }
    for ((k, r, b), set) in &outs {
        if set.len() > 1 {
            problems.push(format!("{} {:?} superposition out of block {b}", coarse.coupling_ids[*k], r));
        }
    }
    for ((k, r, b), set) in &ins {
        if set.len() > 1 {
            problems.push(format!("{} {:?} interference into block {b}", coarse.coupling_ids[*k], r));
        }
    }
    let mut mixing_required = Vec::new();
    for e in coarse.edges.iter().filter(|e| e.readout == EdgeReadout::Cl && e.zero_row) {
        if coarse.ancillary[e.from].is_empty() {
            problems.push(format!(
                "block {} -> {} via {} has unreachable source states and no ancillary coupling",
                e.from, e.to, coarse.coupling_ids[e.coupling]
            ));
        } else {
            mixing_required.push((e.from, e.to, coarse.coupling_ids[e.coupling].clone()));
        }
    }
    if problems.is_empty() {
        Ok(SemiclassicalReport { n_blocks: coarse.blocks.len(), mixing_required })
    } else {
        Err(QsmError::NotSemiclassical(problems))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Advance {
    UntilClick,
    UntilEpsilon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanStage {
    /// Couplings applied in alternation during the stage.
    pub couplings: Vec<String>,
    pub advance: Advance,
    pub budget: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutePlan {
    pub stages: Vec<PlanStage>,
    pub estimated_cost: f64,
    /// Blocks visited, start first.
    pub route: Vec<usize>,
}

#[derive(PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering { other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1)) }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> { Some(self.cmp(other)) }
}

fn min_dwell(anc: &[Ancillary]) -> f64 { anc.iter().map(|a| a.dwell_time).fold(f64::INFINITY, f64::min) }

/// Dijkstra over click edges with cost `dt_ij` plus the cheapest ancillary
/// dwell of the source block when the edge has a zero row.
pub fn plan_route(coarse: &CoarseQSM, start_block: usize, target_block: usize) -> QsmResult<RoutePlan> {
    let nb = coarse.blocks.len();
    for b in [start_block, target_block] {
        if b >= nb {
            return Err(QsmError::UnknownBlock(b));
        }
    }
    let edge_cost = |e: &CoarseEdge| {
        let dwell = if e.zero_row { min_dwell(&coarse.ancillary[e.from]) } else { 0.0 };
        e.traversal_time + dwell
    };
    let mut dist = vec![f64::INFINITY; nb];
    let mut prev: Vec<Option<usize>> = vec![None; nb];
    dist[start_block] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(HeapItem(0.0, start_block));
    while let Some(HeapItem(d, b)) = heap.pop() {
        if d > dist[b] {
            continue;
        }
        for (idx, e) in coarse.edges.iter().enumerate() {
            if e.from != b || e.readout != EdgeReadout::Cl {
                continue;
            }
            let nd = d + edge_cost(e);
            if nd < dist[e.to] {
                dist[e.to] = nd;
                prev[e.to] = Some(idx);
                heap.push(HeapItem(nd, e.to));
            }
        }
    }
    if !dist[target_block].is_finite() {
        return Err(QsmError::Unreachable { from: start_block, to: target_block });
    }
    let mut hops = Vec::new();
    let mut cur = target_block;
    while cur != start_block {
        let idx = prev[cur].expect("reached blocks have predecessors");
        hops.push(idx);
        cur = coarse.edges[idx].from;
    }
    hops.reverse();
    let mut route = vec![start_block];
    let mut stages = Vec::new();
    for &idx in &hops {
        let e = &coarse.edges[idx];
        let mut couplings = Vec::new();
        if e.zero_row {
            couplings.extend(coarse.ancillary[e.from].iter().map(|a| coarse.coupling_ids[a.coupling].clone()));
        }
        couplings.insert(0, coarse.coupling_ids[e.coupling].clone());
        stages.push(PlanStage { couplings, advance: Advance::UntilClick, budget: DEFAULT_STAGE_BUDGET });
        route.push(e.to);
    }
    let target_anc = &coarse.ancillary[target_block];
    let mut cost = dist[target_block];
    if coarse.blocks[target_block].len() > 1 {
        cost += min_dwell(target_anc).min(f64::MAX);
    }
    match (target_anc.is_empty(), stages.last_mut()) {
        (true, Some(last)) => last.advance = Advance::UntilEpsilon,
        _ => stages.push(PlanStage {
            couplings: target_anc.iter().map(|a| coarse.coupling_ids[a.coupling].clone()).collect(),
            advance: Advance::UntilEpsilon,
            budget: DEFAULT_STAGE_BUDGET,
        }),
    }
    if !cost.is_finite() {
        return Err(QsmError::NotSemiclassical(vec![format!("target block {target_block} needs mixing but has no ancillary coupling")]));
    }
    Ok(RoutePlan { stages, estimated_cost: cost, route })
}

/// Block carrying the largest weight of `state`.
pub fn block_of_state(coarse: &CoarseQSM, basis: &Basis, state: &CVector) -> usize {
    let w: Vec<f64> = basis.vectors.iter().map(|b| b.dotc(state).norm_sqr()).collect();
    let mut best = (0, f64::NEG_INFINITY);
    for (i, blk) in coarse.blocks.iter().enumerate() {
        let s: f64 = blk.iter().map(|&v| w[v]).sum();
        if s > best.1 + 1e-12 {
            best = (i, s);
        }
    }
    best.0
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

fn quote(s: &str) -> String { format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\"")) }

/// DOT rendering; color encodes the coupling, solid click, dashed no-click.
pub fn export_dot(graph: &SteeringMultigraph) -> String {
    let mut s = String::from("digraph qsm {\n  node [shape=circle];\n");
    for (i, l) in graph.labels.iter().enumerate() {
        let extra = if i == graph.target { ", peripheries=2" } else { "" };
        let _ = writeln!(s, "  v{i} [label={}{extra}];", quote(l));
    }
    for e in &graph.edges {
        let style = if e.readout == EdgeReadout::Cl { "solid" } else { "dashed" };
        let _ = writeln!(
            s,
            "  v{} -> v{} [color={}, style={style}, label={}];",
            e.from,
            e.to,
            quote(PALETTE[e.coupling % PALETTE.len()]),
            quote(&format!("{} {:?} {:.4}", graph.coupling_ids[e.coupling], e.readout, e.amplitude.norm()).to_lowercase()),
        );
    }
    s.push_str("}\n");
    s
}

/// DOT rendering of the coarse graph with one cluster per block.
pub fn export_coarse_dot(graph: &SteeringMultigraph, coarse: &CoarseQSM) -> String {
    let mut s = String::from("digraph coarse_qsm {\n  compound=true;\n  node [shape=circle];\n");
    for (b, members) in coarse.blocks.iter().enumerate() {
        let _ = writeln!(s, "  subgraph cluster_b{b} {{");
        let anc: Vec<&str> = coarse.ancillary[b].iter().map(|a| coarse.coupling_ids[a.coupling].as_str()).collect();
        let _ = writeln!(s, "    label={};", quote(&format!("B{b} ancillary [{}]", anc.join(" "))));
        for &v in members {
            let extra = if v == graph.target { ", peripheries=2" } else { "" };
            let _ = writeln!(s, "    v{v} [label={}{extra}];", quote(&graph.labels[v]));
        }
        s.push_str("  }\n");
    }
    for e in coarse.edges.iter().filter(|e| e.readout == EdgeReadout::Cl) {
        let (a, b) = (coarse.blocks[e.from][0], coarse.blocks[e.to][0]);
        let _ = writeln!(
            s,
            "  v{a} -> v{b} [ltail=cluster_b{}, lhead=cluster_b{}, color={}, label={}];",
            e.from,
            e.to,
            quote(PALETTE[e.coupling % PALETTE.len()]),
            quote(&format!("{} dtau={:.2}", coarse.coupling_ids[e.coupling], e.traversal_time)),
        );
    }
    s.push_str("}\n");
    s
}
