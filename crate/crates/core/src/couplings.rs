//! Coupling families and their targets.
//!
//! Every family member `V` must annihilate the target (`V|t> = 0`), which
//! makes the target a fixed point of all three steering maps. Fixed families
//! hold a list of members; parent-Hamiltonian families draw a fresh coupling
//! per bond from random blocks in the local ground/excited eigenbasis.

use std::sync::Arc;

use num_complex::Complex64 as C64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hilbert::ops::{self, c};
use crate::hilbert::{
    embed, kernel_and_complement, CMatrix, CVector, HilbertError, LocalOperator, PureState,
    QuditRegister, SiteMap, KERNEL_TOL,
};
use crate::rng::TrajRng;
use crate::steering::{Coupling, CouplingParams, FamilyTag, SteeringError};

/// Relative dark-state residual `|V t| / |V|` above which a coupling is rejected.
pub const DARK_TOL: f64 = 1e-9;

/// Rejection-sampling budget for random tensors.
pub const MAX_TENSOR_ATTEMPTS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CouplingError {
    #[error("dark-state condition violated by {}", format_offenders(.0))]
    DarkStateViolation(Vec<(String, f64)>),

    #[error("tensor network contracts to the zero state")]
    ZeroState,

    #[error("parent Hamiltonian ground space has dimension {0}, expected 1")]
    DegenerateGroundSpace(usize),

    #[error("no admissible random tensor after {0} attempts")]
    DegenerateFamily(usize),

    #[error("two-site term splits into {ground} ground / {excited} excited states, expected 4 / 5")]
    BadSplit { ground: usize, excited: usize },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("bond {bond} out of range for {n_bonds} bonds")]
    BondOutOfRange { bond: usize, n_bonds: usize },

    #[error(transparent)]
    Hilbert(#[from] HilbertError),

    #[error(transparent)]
    Steering(#[from] Box<SteeringError>),
}

impl From<SteeringError> for CouplingError {
    fn from(e: SteeringError) -> Self { Self::Steering(Box::new(e)) }
}

fn format_offenders(v: &[(String, f64)]) -> String {
    v.iter().map(|(id, r)| format!("{id} (residual {r:e})")).collect::<Vec<_>>().join(", ")
}

pub type CouplingResult<T> = Result<T, CouplingError>;

/// Distribution of the random `(w, v, u)` block entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GaussianKind {
    Real,
    /// Independent real and imaginary parts, variance 1/2 each.
    #[default]
    Complex,
}

impl GaussianKind {
    pub fn sample(self, rng: &mut TrajRng) -> C64 {
        match self {
            GaussianKind::Real => c(StandardNormal.sample(rng)),
            GaussianKind::Complex => {
                let s = std::f64::consts::FRAC_1_SQRT_2;
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                C64::new(re * s, im * s)
            }
        }
    }

    pub fn matrix(self, rows: usize, cols: usize, rng: &mut TrajRng) -> CMatrix {
        // row-major fill order, fixed for reproducibility
        let mut m = CMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = self.sample(rng);
            }
        }
        m
    }
}

/// How parent couplings are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParentSampling {
    pub gaussian: GaussianKind,
    /// Draw the ground-to-ground block `u` as well. A generic `u` does not
    /// annihilate the target, so this is off by default.
    pub include_u: bool,
}

impl Default for ParentSampling {
    fn default() -> Self { Self { gaussian: GaussianKind::Complex, include_u: false } }
}

#[derive(Clone, Debug)]
pub enum FamilySource {
    Fixed(Vec<Arc<Coupling>>),
    Parent(ParentGenerator),
}

#[derive(Clone, Debug)]
pub struct CouplingFamily {
    pub register: QuditRegister,
    pub target: PureState,
    pub kind: FamilyTag,
    pub source: FamilySource,
}

impl CouplingFamily {
    pub fn fixed(register: QuditRegister, target: PureState, kind: FamilyTag, members: Vec<Coupling>) -> Self {
        Self { register, target, kind, source: FamilySource::Fixed(members.into_iter().map(Arc::new).collect()) }
    }

    /// Number of members, or of bonds for generated families.
    pub fn n_slots(&self) -> usize {
        match &self.source {
            FamilySource::Fixed(m) => m.len(),
            FamilySource::Parent(g) => g.parent.n_bonds(),
        }
    }

    pub fn is_generated(&self) -> bool { matches!(self.source, FamilySource::Parent(_)) }

    pub fn members(&self) -> Option<&[Arc<Coupling>]> {
        match &self.source {
            FamilySource::Fixed(m) => Some(m),
            FamilySource::Parent(_) => None,
        }
    }

    /// The coupling for `slot`: the fixed member, or a fresh sample.
    pub fn draw(&self, slot: usize, rng: &mut TrajRng) -> CouplingResult<Arc<Coupling>> {
        match &self.source {
            FamilySource::Fixed(m) => m
                .get(slot)
                .cloned()
                .ok_or(CouplingError::BondOutOfRange { bond: slot, n_bonds: m.len() }),
            FamilySource::Parent(g) => Ok(Arc::new(g.sample(slot, rng)?)),
        }
    }

    pub fn member_by_id(&self, id: &str) -> Option<Arc<Coupling>> {
        self.members()?.iter().find(|c| c.id() == id).cloned()
    }

    pub fn parent(&self) -> Option<&ParentHamiltonian> {
        match &self.source {
            FamilySource::Parent(g) => Some(&g.parent),
            FamilySource::Fixed(_) => None,
        }
    }
}

/// Sampler of parent-Hamiltonian couplings with cached site maps.
#[derive(Clone, Debug)]
pub struct ParentGenerator {
    pub parent: Arc<ParentHamiltonian>,
    pub sampling: ParentSampling,
    maps: Vec<Arc<SiteMap>>,
}

impl ParentGenerator {
    pub fn new(parent: Arc<ParentHamiltonian>, sampling: ParentSampling) -> CouplingResult<Self> {
        let maps = parent
            .terms
            .iter()
            .map(|t| SiteMap::new(&parent.register, t.sites()).map(Arc::new))
            .collect::<Result<_, _>>()?;
        Ok(Self { parent, sampling, maps })
    }

    pub fn sample(&self, bond: usize, rng: &mut TrajRng) -> CouplingResult<Coupling> {
        let p = &self.parent;
        if bond >= p.n_bonds() {
            return Err(CouplingError::BondOutOfRange { bond, n_bonds: p.n_bonds() });
        }
        let (ng, ne) = (p.ground.ncols(), p.excited.ncols());
        let g = self.sampling.gaussian;
        let w = g.matrix(ng, ne, rng);
        let v = g.matrix(ne, ne, rng);
        let u = if self.sampling.include_u { g.matrix(ng, ng, rng) } else { CMatrix::zeros(ng, ng) };
        parent_coupling_with_map(p, bond, w, v, u, self.maps[bond].clone())
    }
}

/// Uniform bond-dimension-2 spin-1 tensor `A[alpha][i][j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<Vec<[f64; 2]>>>", into = "Vec<Vec<Vec<[f64; 2]>>>")]
pub struct MpsTensor {
    pub a: [[[C64; 2]; 2]; 3],
}

impl MpsTensor {
    pub fn matrix(&self, alpha: usize) -> nalgebra::Matrix2<C64> {
        let m = &self.a[alpha];
        nalgebra::Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1])
    }

    pub fn from_real(a: [[[f64; 2]; 2]; 3]) -> Self {
        let mut out = [[[c(0.0); 2]; 2]; 3];
        for (o, r) in out.iter_mut().zip(a.iter()) {
            for (oi, ri) in o.iter_mut().zip(r.iter()) {
                for (z, x) in oi.iter_mut().zip(ri.iter()) {
                    *z = c(*x);
                }
            }
        }
        Self { a: out }
    }

    pub fn entries(&self) -> impl Iterator<Item = C64> + '_ {
        self.a.iter().flat_map(|m| m.iter().flat_map(|r| r.iter().copied()))
    }
}

impl TryFrom<Vec<Vec<Vec<[f64; 2]>>>> for MpsTensor {
    type Error = String;

    fn try_from(v: Vec<Vec<Vec<[f64; 2]>>>) -> Result<Self, String> {
        let bad = || "tensor must have shape [3][2][2] of [re, im] pairs".to_string();
        if v.len() != 3 {
            return Err(bad());
        }
        let mut a = [[[c(0.0); 2]; 2]; 3];
        for (alpha, m) in v.iter().enumerate() {
            if m.len() != 2 || m.iter().any(|r| r.len() != 2) {
                return Err(bad());
            }
            for i in 0..2 {
                for j in 0..2 {
                    a[alpha][i][j] = C64::new(m[i][j][0], m[i][j][1]);
                }
            }
        }
        Ok(Self { a })
    }
}

impl From<MpsTensor> for Vec<Vec<Vec<[f64; 2]>>> {
    fn from(t: MpsTensor) -> Self {
        t.a.iter()
            .map(|m| m.iter().map(|r| r.iter().map(|z| [z.re, z.im]).collect()).collect())
            .collect()
    }
}

/// Periodic uniform MPS on `n_sites` spin-1 sites. Physical level `alpha`
/// (0, 1, 2) of each site is the local basis index.
#[derive(Clone, Debug)]
pub struct MpsTarget {
    pub tensor: MpsTensor,
    pub n_sites: usize,
    pub state: PureState,
}

/// Two-site parent terms `h = 1 - P` on every periodic bond.
#[derive(Clone, Debug)]
pub struct ParentHamiltonian {
    pub register: QuditRegister,
    pub target: PureState,
    /// Bond `k` acts on sites `(k, k+1 mod N)`.
    pub terms: Vec<LocalOperator>,
    /// The common 9x9 local term (identical on every bond).
    pub local_term: CMatrix,
    /// Columns: orthonormal local ground states.
    pub ground: CMatrix,
    /// Columns: orthonormal local excited states.
    pub excited: CMatrix,
    pub gap: f64,
}

impl ParentHamiltonian {
    pub fn n_bonds(&self) -> usize { self.terms.len() }

    pub fn bond_sites(&self, bond: usize) -> [usize; 2] {
        let n = self.register.n_sites();
        [bond, (bond + 1) % n]
    }

    /// Full `H = sum_k h_k`.
    pub fn full_matrix(&self) -> CouplingResult<CMatrix> {
        let d = self.register.total_dim();
        let mut h = CMatrix::zeros(d, d);
        for t in &self.terms {
            h += embed(t, &self.register)?;
        }
        Ok(h)
    }
}

pub fn single_qubit_family(gamma: f64) -> CouplingResult<CouplingFamily> {
    check_gamma(gamma)?;
    let r = QuditRegister::qubits(1)?;
    let target = PureState::basis(r.clone(), 0)?;
    let v = Coupling::new(
        "V",
        LocalOperator::new(vec![0], ops::sigma_minus() * c(gamma))?,
        FamilyTag::SingleQubit,
        CouplingParams::None,
        &r,
    )?;
    Ok(CouplingFamily::fixed(r, target, FamilyTag::SingleQubit, vec![v]))
}

pub fn product_family(n_qubits: usize, gamma: f64) -> CouplingResult<CouplingFamily> {
    check_gamma(gamma)?;
    let r = QuditRegister::qubits(n_qubits)?;
    let target = PureState::basis(r.clone(), 0)?;
    let members = (0..n_qubits)
        .map(|i| {
            Coupling::new(
                format!("V{i}"),
                LocalOperator::new(vec![i], ops::sigma_minus() * c(gamma))?,
                FamilyTag::Product,
                CouplingParams::Site(i),
                &r,
            )
            .map_err(CouplingError::from)
        })
        .collect::<CouplingResult<Vec<_>>>()?;
    Ok(CouplingFamily::fixed(r, target, FamilyTag::Product, members))
}

fn check_gamma(gamma: f64) -> CouplingResult<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(CouplingError::InvalidParameter(format!("gamma must be positive, got {gamma}")))
    }
}

/// Single-qubit rotation taking `|0>` to `(|0> + |1>)/sqrt 2`.
pub fn graph_rotation() -> CMatrix {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    CMatrix::from_row_slice(2, 2, &[c(s), c(-s), c(s), c(s)])
}

/// Two-qubit phase gate `1 - 2|00><00|`.
pub fn graph_phase_gate() -> CMatrix {
    let mut m = CMatrix::identity(4, 4);
    m[(0, 0)] = c(-1.0);
    m
}

fn check_graph(n: usize, edges: &[(usize, usize)]) -> CouplingResult<()> {
    for (k, &(a, b)) in edges.iter().enumerate() {
        if a >= n || b >= n {
            return Err(CouplingError::InvalidGraph(format!("edge ({a},{b}) out of range for {n} vertices")));
        }
        if a == b {
            return Err(CouplingError::InvalidGraph(format!("self-loop on vertex {a}")));
        }
        if edges[..k].iter().any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a)) {
            return Err(CouplingError::InvalidGraph(format!("duplicate edge ({a},{b})")));
        }
    }
    Ok(())
}

/// Full unitary `U = prod_edges U_gr * prod_j R_j` with `|psi_G> = U|0..0>`.
pub fn graph_unitary(n: usize, edges: &[(usize, usize)]) -> CouplingResult<CMatrix> {
    check_graph(n, edges)?;
    let r = QuditRegister::qubits(n)?;
    let d = r.total_dim();
    let mut u = CMatrix::identity(d, d);
    for j in 0..n {
        u = embed(&LocalOperator::new(vec![j], graph_rotation())?, &r)? * u;
    }
    for &(a, b) in edges {
        u = embed(&LocalOperator::new(vec![a, b], graph_phase_gate())?, &r)? * u;
    }
    Ok(u)
}

pub fn graph_state(n: usize, edges: &[(usize, usize)]) -> CouplingResult<PureState> {
    let u = graph_unitary(n, edges)?;
    Ok(PureState::normalized(QuditRegister::qubits(n)?, u.column(0).clone_owned())?)
}

/// `V(i) = gamma U sigma-_i U^dagger`, supported on `i` and its neighbours.
pub fn graph_state_family(n: usize, edges: &[(usize, usize)], gamma: f64) -> CouplingResult<CouplingFamily> {
    check_gamma(gamma)?;
    check_graph(n, edges)?;
    let r = QuditRegister::qubits(n)?;
    let target = graph_state(n, edges)?;
    let rot = graph_rotation();
    let local_lowering = &rot * ops::sigma_minus() * rot.adjoint() * c(gamma);
    let mut members = Vec::with_capacity(n);
    for i in 0..n {
        let mut nbrs: Vec<usize> = edges
            .iter()
            .filter_map(|&(a, b)| if a == i { Some(b) } else if b == i { Some(a) } else { None })
            .collect();
        nbrs.sort_unstable();
        let mut sites = vec![i];
        sites.extend(&nbrs);
        let sub = r.subregister(&sites)?;
        let mut g = CMatrix::identity(sub.total_dim(), sub.total_dim());
        for k in 1..sites.len() {
            g = embed(&LocalOperator::new(vec![0, k], graph_phase_gate())?, &sub)? * g;
        }
        let core = embed(&LocalOperator::new(vec![0], local_lowering.clone())?, &sub)?;
        let m = &g * core * g.adjoint();
        members.push(Coupling::new(
            format!("V{i}"),
            LocalOperator::new(sites, m)?,
            FamilyTag::GraphState,
            CouplingParams::Site(i),
            &r,
        )?);
    }
    Ok(CouplingFamily::fixed(r, target, FamilyTag::GraphState, members))
}

/// Operator on the listed sites given as a sum of products of single-site
/// factors: `sum_k coef_k prod_(site, m) m_site`.
pub fn sum_of_products(
    register: &QuditRegister,
    sites: &[usize],
    terms: &[(C64, Vec<(usize, CMatrix)>)],
) -> CouplingResult<LocalOperator> {
    let sub = register.subregister(sites)?;
    let d = sub.total_dim();
    let mut total = CMatrix::zeros(d, d);
    for (coef, factors) in terms {
        let mut m = CMatrix::identity(d, d);
        for (site, f) in factors {
            let pos = sites
                .iter()
                .position(|s| s == site)
                .ok_or(HilbertError::SiteOutOfRange { site: *site, n_sites: sites.len() })?;
            m = embed(&LocalOperator::new(vec![pos], f.clone())?, &sub)? * m;
        }
        total += m * *coef;
    }
    Ok(LocalOperator::new(sites.to_vec(), total)?)
}

/// `(|100> + |010> + |001>)/sqrt 3` with sites A, B, C = 0, 1, 2.
pub fn w_state() -> CouplingResult<PureState> {
    let r = QuditRegister::qubits(3)?;
    let mut v = CVector::zeros(8);
    for idx in [1usize, 2, 4] {
        v[idx] = c(1.0);
    }
    Ok(PureState::normalized(r, v)?)
}

pub fn w_state_family() -> CouplingResult<CouplingFamily> {
    let r = QuditRegister::qubits(3)?;
    let (sm, sp) = (ops::sigma_minus(), ops::sigma_plus());
    let (p0, p1) = (ops::projector(2, 0), ops::projector(2, 1));
    let one = c(1.0);
    // (id, sites, sum of coefficient * product of single-site factors)
    type Term = (C64, Vec<(usize, CMatrix)>);
    let defs: Vec<(&str, Vec<usize>, Vec<Term>)> = vec![
        ("V1", vec![0, 1], vec![(one, vec![(0, sm.clone())]), (-one, vec![(1, sm.clone())])]),
        (
            "V2",
            vec![0, 1, 2],
            vec![(one, vec![(0, sp.clone()), (1, sp.clone())]), (-one, vec![(1, sp.clone()), (2, sp.clone())])],
        ),
        ("V3", vec![0, 1], vec![(one, vec![(0, sm.clone()), (1, sp.clone())]), (-one, vec![(0, p0.clone()), (1, p1.clone())])]),
        ("V4", vec![1, 2], vec![(one, vec![(1, sp.clone()), (2, sm.clone())]), (-one, vec![(1, p1.clone()), (2, p0.clone())])]),
    ];
    let members = defs
        .into_iter()
        .map(|(id, sites, terms)| {
            let op = sum_of_products(&r, &sites, &terms)?;
            Coupling::new(id, op, FamilyTag::WState, CouplingParams::None, &r).map_err(CouplingError::from)
        })
        .collect::<CouplingResult<Vec<_>>>()?;
    Ok(CouplingFamily::fixed(r, w_state()?, FamilyTag::WState, members))
}

pub fn aklt_tensor() -> MpsTensor {
    let a = (2.0f64 / 3.0).sqrt();
    let b = (1.0f64 / 3.0).sqrt();
    MpsTensor::from_real([[[0.0, a], [0.0, 0.0]], [[-b, 0.0], [0.0, b]], [[0.0, 0.0], [-a, 0.0]]])
}

/// Uniform `[0,1]` entries, resampled until the parent Hamiltonian at
/// `n_sites` has a clean 4/5 local split and a unique ground state.
/// Returns the tensor and the number of attempts used.
pub fn random_mps_tensor(rng: &mut TrajRng, n_sites: usize) -> CouplingResult<(MpsTensor, usize)> {
    for attempt in 1..=MAX_TENSOR_ATTEMPTS {
        let mut a = [[[0.0; 2]; 2]; 3];
        for m in a.iter_mut() {
            for r in m.iter_mut() {
                for x in r.iter_mut() {
                    *x = rng.random::<f64>();
                }
            }
        }
        let t = MpsTensor::from_real(a);
        let ok = mps_target(&t, n_sites).and_then(|m| parent_hamiltonian(&m));
        match ok {
            Ok(_) => return Ok((t, attempt)),
            Err(e) => log::debug!("rejecting random tensor (attempt {attempt}): {e}"),
        }
    }
    Err(CouplingError::DegenerateFamily(MAX_TENSOR_ATTEMPTS))
}

/// Contract `sum tr(A^a0 A^a1 ... A^a(N-1)) |a0 a1 ...>` and normalize.
pub fn mps_target(tensor: &MpsTensor, n_sites: usize) -> CouplingResult<MpsTarget> {
    if n_sites < 3 {
        return Err(CouplingError::InvalidParameter(format!("MPS targets need at least 3 sites, got {n_sites}")));
    }
    let r = QuditRegister::qutrits(n_sites)?;
    let mats: Vec<_> = (0..3).map(|a| tensor.matrix(a)).collect();
    let amps = CVector::from_iterator(
        r.total_dim(),
        (0..r.total_dim()).map(|idx| {
            let digits = r.digits(idx);
            let mut m = nalgebra::Matrix2::<C64>::identity();
            for &a in &digits {
                m *= mats[a];
            }
            m.trace()
        }),
    );
    let n = amps.norm();
    if n < 1e-12 {
        return Err(CouplingError::ZeroState);
    }
    Ok(MpsTarget { tensor: tensor.clone(), n_sites, state: PureState::new(r, amps.unscale(n))? })
}

/// Local two-site term `1 - P`, with `P` the projector onto the span of the
/// four vectors `(A^a A^b)_{il}` in the two-site basis `a + 3b`.
pub fn local_parent_term(tensor: &MpsTensor) -> CMatrix {
    let mats: Vec<_> = (0..3).map(|a| tensor.matrix(a)).collect();
    let mut span = CMatrix::zeros(9, 4);
    for a in 0..3 {
        for b in 0..3 {
            let ab = mats[a] * mats[b];
            for i in 0..2 {
                for l in 0..2 {
                    span[(a + 3 * b, 2 * i + l)] = ab[(i, l)];
                }
            }
        }
    }
    let gram = &span * span.adjoint();
    let (vals, vecs) = crate::hilbert::hermitian_eigen(&gram);
    let top = vals.last().copied().unwrap_or(0.0);
    let mut p = CMatrix::zeros(9, 9);
    if top > 0.0 {
        for (k, &v) in vals.iter().enumerate() {
            if v > KERNEL_TOL * top {
                let col = vecs.column(k);
                p += col * col.adjoint();
            }
        }
    }
    CMatrix::identity(9, 9) - p
}

pub fn parent_hamiltonian(mps: &MpsTarget) -> CouplingResult<ParentHamiltonian> {
    let h = local_parent_term(&mps.tensor);
    let split = kernel_and_complement(&h, KERNEL_TOL)?;
    if split.ground.len() != 4 {
        return Err(CouplingError::BadSplit { ground: split.ground.len(), excited: split.excited.len() });
    }
    let register = mps.state.register().clone();
    let n = mps.n_sites;
    let terms = (0..n)
        .map(|k| LocalOperator::new(vec![k, (k + 1) % n], h.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut ph = ParentHamiltonian {
        register,
        target: mps.state.clone(),
        terms,
        local_term: h,
        ground: split.ground_matrix(),
        excited: split.excited_matrix(),
        gap: 0.0,
    };
    let full = ph.full_matrix()?;
    let global = kernel_and_complement(&full, KERNEL_TOL)?;
    if global.ground.len() != 1 {
        return Err(CouplingError::DegenerateGroundSpace(global.ground.len()));
    }
    ph.gap = global.shifted_eigenvalues[1];
    Ok(ph)
}

/// `V = Phi w Theta^dagger + Theta v Theta^dagger + Phi u Phi^dagger` on bond `bond`.
pub fn parent_coupling_from_blocks(
    parent: &ParentHamiltonian,
    bond: usize,
    w: CMatrix,
    v: CMatrix,
    u: CMatrix,
) -> CouplingResult<Coupling> {
    if bond >= parent.n_bonds() {
        return Err(CouplingError::BondOutOfRange { bond, n_bonds: parent.n_bonds() });
    }
    let map = Arc::new(SiteMap::new(&parent.register, &parent.bond_sites(bond))?);
    parent_coupling_with_map(parent, bond, w, v, u, map)
}

fn parent_coupling_with_map(
    parent: &ParentHamiltonian,
    bond: usize,
    w: CMatrix,
    v: CMatrix,
    u: CMatrix,
    map: Arc<SiteMap>,
) -> CouplingResult<Coupling> {
    let (phi, theta) = (&parent.ground, &parent.excited);
    let (ng, ne) = (phi.ncols(), theta.ncols());
    if w.shape() != (ng, ne) || v.shape() != (ne, ne) || u.shape() != (ng, ng) {
        return Err(CouplingError::InvalidParameter(format!(
            "block shapes w {:?}, v {:?}, u {:?} do not match a {ng}/{ne} split",
            w.shape(),
            v.shape(),
            u.shape()
        )));
    }
    let theta_h = theta.adjoint();
    let m = phi * &w * &theta_h + theta * &v * &theta_h + phi * &u * phi.adjoint();
    let op = LocalOperator::new(parent.bond_sites(bond).to_vec(), m)?;
    Ok(Coupling::with_map(
        format!("V{bond}"),
        op,
        FamilyTag::ParentHam,
        CouplingParams::Parent { bond, w, v, u },
        &parent.register,
        map,
    )?)
}

pub fn sample_parent_coupling(
    parent: &ParentHamiltonian,
    bond: usize,
    sampling: ParentSampling,
    rng: &mut TrajRng,
) -> CouplingResult<Coupling> {
    let (ng, ne) = (parent.ground.ncols(), parent.excited.ncols());
    if bond >= parent.n_bonds() {
        return Err(CouplingError::BondOutOfRange { bond, n_bonds: parent.n_bonds() });
    }
    let g = sampling.gaussian;
    let w = g.matrix(ng, ne, rng);
    let v = g.matrix(ne, ne, rng);
    let u = if sampling.include_u { g.matrix(ng, ng, rng) } else { CMatrix::zeros(ng, ng) };
    parent_coupling_from_blocks(parent, bond, w, v, u)
}

pub fn parent_family(parent: ParentHamiltonian, sampling: ParentSampling) -> CouplingResult<CouplingFamily> {
    let register = parent.register.clone();
    let target = parent.target.clone();
    let g = ParentGenerator::new(Arc::new(parent), sampling)?;
    Ok(CouplingFamily { register, target, kind: FamilyTag::ParentHam, source: FamilySource::Parent(g) })
}

/// Family for an MPS target built from `tensor` on `n_sites` sites.
pub fn mps_family(tensor: &MpsTensor, n_sites: usize, sampling: ParentSampling) -> CouplingResult<CouplingFamily> {
    parent_family(parent_hamiltonian(&mps_target(tensor, n_sites)?)?, sampling)
}

/// Per-coupling relative residual `|V t| / |V|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DarkStateReport {
    pub residuals: Vec<(String, f64)>,
}

impl DarkStateReport {
    pub fn max_residual(&self) -> f64 { self.residuals.iter().map(|r| r.1).fold(0.0, f64::max) }
}

pub fn dark_residual(coupling: &Coupling, target: &PureState) -> f64 {
    let n = coupling.op_norm();
    if n == 0.0 {
        return 0.0;
    }
    coupling.apply(target.amplitudes()).norm() / n
}

pub fn validate_couplings<'a>(
    couplings: impl IntoIterator<Item = &'a Coupling>,
    target: &PureState,
) -> CouplingResult<DarkStateReport> {
    let residuals: Vec<(String, f64)> =
        couplings.into_iter().map(|c| (c.id().to_string(), dark_residual(c, target))).collect();
    let offenders: Vec<_> = residuals.iter().filter(|r| r.1.is_nan() || r.1 > DARK_TOL).cloned().collect();
    if !offenders.is_empty() {
        return Err(CouplingError::DarkStateViolation(offenders));
    }
    Ok(DarkStateReport { residuals })
}

/// Check fixed members, or `samples_per_bond` draws per bond for generated
/// families.
pub fn validate_dark_states(
    family: &CouplingFamily,
    samples_per_bond: usize,
    rng: &mut TrajRng,
) -> CouplingResult<DarkStateReport> {
    match &family.source {
        FamilySource::Fixed(m) => validate_couplings(m.iter().map(|c| c.as_ref()), &family.target),
        FamilySource::Parent(g) => {
            let mut drawn = Vec::with_capacity(samples_per_bond * g.parent.n_bonds());
            for _ in 0..samples_per_bond {
                for k in 0..g.parent.n_bonds() {
                    drawn.push(g.sample(k, rng)?);
                }
            }
            validate_couplings(drawn.iter(), &family.target)
        }
    }
}
