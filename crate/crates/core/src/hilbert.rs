//! Dense linear algebra over small qudit registers.
//!
//! Basis ordering is little-endian: site 0 varies fastest, so the full index
//! of a configuration `(a_0, a_1, ..., a_{N-1})` is `a_0 + d_0 a_1 + d_0 d_1
//! a_2 + ...`. Every state, operator and export in the crate uses this order.
//! Local operators order their own basis the same way over their `sites`
//! list, i.e. the first listed site varies fastest.

use std::sync::Arc;

use nalgebra as na;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type CMatrix = na::DMatrix<C64>;
pub type CVector = na::DVector<C64>;

/// Largest supported Hilbert-space dimension (3^7).
pub const MAX_TOTAL_DIM: usize = 2187;

/// Tolerance on normalization of pure states.
pub const NORM_TOL: f64 = 1e-10;

/// Eigenvalues in `[-PSD_CLAMP, 0)` are treated as zero; below that a matrix
/// is rejected as not positive semidefinite.
pub const PSD_CLAMP: f64 = 1e-9;

/// Default tolerance for [`kernel_and_complement`], relative to the spectral
/// range.
pub const KERNEL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HilbertError {
    #[error("invalid local dimension {dim} at site {site}: must be 2 or 3")]
    BadLocalDim { site: usize, dim: usize },

    #[error("register must have at least one site")]
    EmptyRegister,

    #[error("total dimension {0} exceeds the supported maximum {MAX_TOTAL_DIM}")]
    TooLarge(usize),

    #[error("site index {site} out of range for a register of {n_sites} sites")]
    SiteOutOfRange { site: usize, n_sites: usize },

    #[error("site {0} listed more than once")]
    DuplicateSite(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("states live on different registers")]
    RegisterMismatch,

    #[error("state is not normalized (norm {0})")]
    NotNormalized(f64),

    #[error("matrix is not Hermitian (max deviation {0:e})")]
    NotHermitian(f64),

    #[error("matrix has trace {0}, expected 1")]
    BadTrace(f64),

    #[error("matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("subsystem must contain at least one site")]
    EmptySubsystem,

    #[error("zero vector cannot be normalized")]
    ZeroVector,
}

pub type HilbertResult<T> = Result<T, HilbertError>;

/// Local dimensions of a chain of qubits and qutrits.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuditRegister {
    local_dims: Vec<usize>,
    total_dim: usize,
}

impl QuditRegister {
    pub fn new(local_dims: Vec<usize>) -> HilbertResult<Self> {
        if local_dims.is_empty() {
            return Err(HilbertError::EmptyRegister);
        }
        for (site, &dim) in local_dims.iter().enumerate() {
            if dim != 2 && dim != 3 {
                return Err(HilbertError::BadLocalDim { site, dim });
            }
        }
        let total_dim = local_dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d).filter(|&t| t <= MAX_TOTAL_DIM))
            .ok_or_else(|| {
                HilbertError::TooLarge(local_dims.iter().map(|&d| d as f64).product::<f64>() as usize)
            })?;
        Ok(Self { local_dims, total_dim })
    }

    pub fn qubits(n: usize) -> HilbertResult<Self> { Self::new(vec![2; n]) }

    pub fn qutrits(n: usize) -> HilbertResult<Self> { Self::new(vec![3; n]) }

    pub fn n_sites(&self) -> usize { self.local_dims.len() }

    pub fn total_dim(&self) -> usize { self.total_dim }

    pub fn local_dims(&self) -> &[usize] { &self.local_dims }

    pub fn local_dim(&self, site: usize) -> usize { self.local_dims[site] }

    /// Index stride of `site` in the full basis.
    pub fn stride(&self, site: usize) -> usize {
        self.local_dims[..site].iter().product()
    }

    /// Decompose a full basis index into per-site levels.
    pub fn digits(&self, mut index: usize) -> Vec<usize> {
        self.local_dims
            .iter()
            .map(|&d| {
                let a = index % d;
                index /= d;
                a
            })
            .collect()
    }

    /// Full basis index of a per-site configuration.
    pub fn index_of(&self, digits: &[usize]) -> usize {
        digits
            .iter()
            .zip(&self.local_dims)
            .rev()
            .fold(0, |acc, (&a, &d)| acc * d + a)
    }

    pub fn check_sites(&self, sites: &[usize]) -> HilbertResult<()> {
        for (k, &s) in sites.iter().enumerate() {
            if s >= self.n_sites() {
                return Err(HilbertError::SiteOutOfRange { site: s, n_sites: self.n_sites() });
            }
            if sites[..k].contains(&s) {
                return Err(HilbertError::DuplicateSite(s));
            }
        }
        Ok(())
    }

    /// Product of the local dimensions of `sites`.
    pub fn support_dim(&self, sites: &[usize]) -> usize {
        sites.iter().map(|&s| self.local_dims[s]).product()
    }

    /// Register made of the listed sites, in the listed order.
    pub fn subregister(&self, sites: &[usize]) -> HilbertResult<Self> {
        self.check_sites(sites)?;
        Self::new(sites.iter().map(|&s| self.local_dims[s]).collect())
    }
}

/// Index bookkeeping for acting on a subset of sites.
///
/// `offsets[l]` is the full-index offset of local configuration `l`, and
/// `bases` lists the full indices of every configuration of the complement
/// with the supported sites set to zero. Full index = `base + offset`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SiteMap {
    offsets: Vec<usize>,
    bases: Vec<usize>,
}

impl SiteMap {
    pub fn new(register: &QuditRegister, sites: &[usize]) -> HilbertResult<Self> {
        register.check_sites(sites)?;
        let dims: Vec<usize> = sites.iter().map(|&s| register.local_dim(s)).collect();
        let strides: Vec<usize> = sites.iter().map(|&s| register.stride(s)).collect();
        let local_dim: usize = dims.iter().product();
        let offsets = (0..local_dim)
            .map(|mut l| {
                let mut off = 0;
                for (d, st) in dims.iter().zip(&strides) {
                    off += (l % d) * st;
                    l /= d;
                }
                off
            })
            .collect();
        let bases = (0..register.total_dim())
            .filter(|&i| {
                sites
                    .iter()
                    .zip(&strides)
                    .zip(&dims)
                    .all(|((_, &st), &d)| (i / st) % d == 0)
            })
            .collect();
        Ok(Self { offsets, bases })
    }

    pub fn local_dim(&self) -> usize { self.offsets.len() }

    pub fn offsets(&self) -> &[usize] { &self.offsets }

    pub fn bases(&self) -> &[usize] { &self.bases }
}

/// A matrix acting on an ordered list of sites.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalOperator {
    sites: Vec<usize>,
    matrix: CMatrix,
}

impl LocalOperator {
    /// Build without a register; dimensions are checked on use.
    pub fn new(sites: Vec<usize>, matrix: CMatrix) -> HilbertResult<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(HilbertError::DimensionMismatch {
                expected: matrix.nrows(),
                got: matrix.ncols(),
            });
        }
        for (k, &s) in sites.iter().enumerate() {
            if sites[..k].contains(&s) {
                return Err(HilbertError::DuplicateSite(s));
            }
        }
        Ok(Self { sites, matrix })
    }

    pub fn sites(&self) -> &[usize] { &self.sites }

    pub fn matrix(&self) -> &CMatrix { &self.matrix }

    pub fn into_matrix(self) -> CMatrix { self.matrix }

    pub fn validate(&self, register: &QuditRegister) -> HilbertResult<()> {
        register.check_sites(&self.sites)?;
        let d = register.support_dim(&self.sites);
        if d != self.matrix.nrows() {
            return Err(HilbertError::DimensionMismatch { expected: d, got: self.matrix.nrows() });
        }
        Ok(())
    }

    pub fn adjoint(&self) -> Self {
        Self { sites: self.sites.clone(), matrix: self.matrix.adjoint() }
    }

    /// Frobenius norm of the local matrix.
    pub fn norm(&self) -> f64 { self.matrix.norm() }
}

/// A local operator compiled against a register for fast repeated
/// application to amplitude vectors and density-matrix columns.
#[derive(Clone, Debug)]
pub struct LocalKernel {
    map: Arc<SiteMap>,
    dim: usize,
    // row-major
    data: Vec<C64>,
}

impl LocalKernel {
    pub fn new(op: &LocalOperator, register: &QuditRegister) -> HilbertResult<Self> {
        op.validate(register)?;
        let map = Arc::new(SiteMap::new(register, op.sites())?);
        Ok(Self::with_map(map, op.matrix()))
    }

    /// Reuse an existing index map; `matrix` must match its local dimension.
    pub fn with_map(map: Arc<SiteMap>, matrix: &CMatrix) -> Self {
        let dim = matrix.nrows();
        debug_assert_eq!(dim, map.local_dim());
        let mut data = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                data.push(matrix[(i, j)]);
            }
        }
        Self { map, dim, data }
    }

    pub fn map(&self) -> &Arc<SiteMap> { &self.map }

    /// `output = op * input` on full-dimension slices.
    pub fn apply_into(&self, input: &[C64], output: &mut [C64]) {
        let d = self.dim;
        let offs = self.map.offsets();
        let mut buf = [C64::new(0.0, 0.0); 64];
        let mut heap;
        let gather: &mut [C64] = if d <= 64 {
            &mut buf[..d]
        } else {
            heap = vec![C64::new(0.0, 0.0); d];
            &mut heap
        };
        for &b in self.map.bases() {
            for (g, &o) in gather.iter_mut().zip(offs) {
                *g = input[b + o];
            }
            for (i, &oi) in offs.iter().enumerate() {
                let row = &self.data[i * d..(i + 1) * d];
                let mut acc = C64::new(0.0, 0.0);
                for (m, g) in row.iter().zip(gather.iter()) {
                    acc += m * g;
                }
                output[b + oi] = acc;
            }
        }
    }

    pub fn apply(&self, input: &CVector) -> CVector {
        let mut out = CVector::zeros(input.len());
        self.apply_into(input.as_slice(), out.as_mut_slice());
        out
    }

    /// `op * rho`, column by column.
    pub fn apply_left(&self, rho: &CMatrix) -> CMatrix {
        let n = rho.nrows();
        let mut out = CMatrix::zeros(n, n);
        for c in 0..n {
            let src = rho.column(c);
            let mut dst = out.column_mut(c);
            self.apply_into(src.as_slice(), dst.as_mut_slice());
        }
        out
    }

    /// `op * rho * op^dagger`.
    pub fn sandwich(&self, rho: &CMatrix) -> CMatrix {
        let left = self.apply_left(rho);
        self.apply_left(&left.adjoint()).adjoint()
    }
}

/// Embed a local operator as a full `D x D` matrix (operator on its sites,
/// identity elsewhere).
pub fn embed(op: &LocalOperator, register: &QuditRegister) -> HilbertResult<CMatrix> {
    let kernel = LocalKernel::new(op, register)?;
    Ok(kernel.apply_left(&CMatrix::identity(register.total_dim(), register.total_dim())))
}

/// A normalized amplitude vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PureState {
    register: QuditRegister,
    amplitudes: CVector,
}

impl PureState {
    pub fn new(register: QuditRegister, amplitudes: CVector) -> HilbertResult<Self> {
        if amplitudes.len() != register.total_dim() {
            return Err(HilbertError::DimensionMismatch {
                expected: register.total_dim(),
                got: amplitudes.len(),
            });
        }
        let n = amplitudes.norm();
        if (n - 1.0).abs() > NORM_TOL {
            return Err(HilbertError::NotNormalized(n));
        }
        Ok(Self { register, amplitudes })
    }

    /// Normalize `amplitudes` before wrapping.
    pub fn normalized(register: QuditRegister, amplitudes: CVector) -> HilbertResult<Self> {
        let n = amplitudes.norm();
        if n < 1e-300 || !n.is_finite() {
            return Err(HilbertError::ZeroVector);
        }
        Self::new(register, amplitudes.unscale(n))
    }

    pub fn basis(register: QuditRegister, index: usize) -> HilbertResult<Self> {
        let d = register.total_dim();
        if index >= d {
            return Err(HilbertError::DimensionMismatch { expected: d, got: index });
        }
        let mut v = CVector::zeros(d);
        v[index] = C64::new(1.0, 0.0);
        Ok(Self { register, amplitudes: v })
    }

    /// Product state with every site in the given local level.
    pub fn uniform_level(register: QuditRegister, level: usize) -> HilbertResult<Self> {
        let digits = vec![level; register.n_sites()];
        if register.local_dims().iter().any(|&d| level >= d) {
            return Err(HilbertError::DimensionMismatch { expected: 2, got: level });
        }
        let index = register.index_of(&digits);
        Self::basis(register, index)
    }

    /// Tensor product of single-site states, site 0 first.
    pub fn product(locals: &[CVector]) -> HilbertResult<Self> {
        let register = QuditRegister::new(locals.iter().map(|v| v.len()).collect())?;
        let mut amps = CVector::from_element(1, C64::new(1.0, 0.0));
        // Site 0 varies fastest, so later sites go on the left of the kron.
        for v in locals {
            amps = v.kronecker(&amps);
        }
        Self::normalized(register, amps)
    }

    pub fn register(&self) -> &QuditRegister { &self.register }

    pub fn amplitudes(&self) -> &CVector { &self.amplitudes }


    pub fn into_amplitudes(self) -> CVector { self.amplitudes }

    pub fn overlap(&self, other: &PureState) -> HilbertResult<C64> {
        if self.register != other.register {
            return Err(HilbertError::RegisterMismatch);
        }
        Ok(self.amplitudes.dotc(&other.amplitudes))
    }

    pub fn to_density(&self) -> MixedState {
        MixedState {
            register: self.register.clone(),
            matrix: &self.amplitudes * self.amplitudes.adjoint(),
        }
    }
}

/// A density matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedState {
    register: QuditRegister,
    matrix: CMatrix,
}

impl MixedState {
    /// Validating constructor: Hermitian, unit trace, PSD within tolerance.
    pub fn new(register: QuditRegister, matrix: CMatrix) -> HilbertResult<Self> {
        let d = register.total_dim();
        if matrix.nrows() != d || matrix.ncols() != d {
            return Err(HilbertError::DimensionMismatch { expected: d, got: matrix.nrows() });
        }
        let dev = hermitian_deviation(&matrix);
        if dev > 1e-10 {
            return Err(HilbertError::NotHermitian(dev));
        }
        let tr = matrix.trace().re;
        if (tr - 1.0).abs() > 1e-10 {
            return Err(HilbertError::BadTrace(tr));
        }
        let min = hermitian_eigen(&matrix).0.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < -PSD_CLAMP {
            return Err(HilbertError::NotPsd(min));
        }
        Ok(Self { register, matrix })
    }

    /// Wrap without validation. Used internally for maps whose trace is
    /// preserved only to the order of the weak-measurement expansion.
    pub(crate) fn from_raw(register: QuditRegister, matrix: CMatrix) -> Self {
        Self { register, matrix }
    }

    pub fn maximally_mixed(register: QuditRegister) -> Self {
        let d = register.total_dim();
        let matrix = CMatrix::identity(d, d).unscale(d as f64);
        Self { register, matrix }
    }

    pub fn register(&self) -> &QuditRegister { &self.register }

    pub fn matrix(&self) -> &CMatrix { &self.matrix }

    pub fn into_matrix(self) -> CMatrix { self.matrix }

    pub fn trace(&self) -> f64 { self.matrix.trace().re }

    pub fn purity(&self) -> f64 { (&self.matrix * &self.matrix).trace().re }

    /// Rescale to unit trace.
    pub fn renormalized(mut self) -> Self {
        let t = self.trace();
        self.matrix.unscale_mut(t);
        self
    }
}

/// Either kind of system state.
#[derive(Clone, Debug, PartialEq)]
pub enum QuantumState {
    Pure(PureState),
    Mixed(MixedState),
}

impl QuantumState {
    pub fn register(&self) -> &QuditRegister {
        match self {
            Self::Pure(p) => p.register(),
            Self::Mixed(m) => m.register(),
        }
    }

    pub fn is_pure(&self) -> bool { matches!(self, Self::Pure(_)) }

    pub fn to_density(&self) -> MixedState {
        match self {
            Self::Pure(p) => p.to_density(),
            Self::Mixed(m) => m.clone(),
        }
    }

    /// Fidelity `<t|rho|t>` to a pure target.
    pub fn fidelity_to(&self, target: &PureState) -> HilbertResult<f64> {
        if self.register() != target.register() {
            return Err(HilbertError::RegisterMismatch);
        }
        Ok(match self {
            Self::Pure(p) => p.amplitudes().dotc(target.amplitudes()).norm_sqr(),
            Self::Mixed(m) => {
                let t = target.amplitudes();
                t.dotc(&(m.matrix() * t)).re
            }
        })
    }
}

impl From<PureState> for QuantumState {
    fn from(p: PureState) -> Self { Self::Pure(p) }
}

impl From<MixedState> for QuantumState {
    fn from(m: MixedState) -> Self { Self::Mixed(m) }
}

/// `1 - <t|rho|t>`, clamped into `[0, 1]`.
pub fn infidelity(state: &QuantumState, target: &PureState) -> HilbertResult<f64> {
    Ok((1.0 - state.fidelity_to(target)?).clamp(0.0, 1.0))
}

/// Partial trace onto `subsystem` (sites listed in the order they should
/// appear in the reduced register).
pub fn reduced_density_matrix(state: &QuantumState, subsystem: &[usize]) -> HilbertResult<MixedState> {
    match state {
        QuantumState::Pure(p) => reduced_from_ensemble(p.register(), &[(1.0, p.amplitudes())], subsystem),
        QuantumState::Mixed(m) => {
            if subsystem.is_empty() {
                return Err(HilbertError::EmptySubsystem);
            }
            let sub = m.register().subregister(subsystem)?;
            let map = SiteMap::new(m.register(), subsystem)?;
            let d = map.local_dim();
            let offs = map.offsets();
            let mut out = CMatrix::zeros(d, d);
            for &b in map.bases() {
                for i in 0..d {
                    for j in 0..d {
                        out[(i, j)] += m.matrix()[(b + offs[i], b + offs[j])];
                    }
                }
            }
            Ok(MixedState::from_raw(sub, out))
        }
    }
}

/// Partial trace of `sum_k w_k |v_k><v_k|` without forming the full matrix.
pub fn reduced_from_ensemble(
    register: &QuditRegister,
    ensemble: &[(f64, &CVector)],
    subsystem: &[usize],
) -> HilbertResult<MixedState> {
    if subsystem.is_empty() {
        return Err(HilbertError::EmptySubsystem);
    }
    let sub = register.subregister(subsystem)?;
    let map = SiteMap::new(register, subsystem)?;
    let d = map.local_dim();
    let offs = map.offsets();
    let mut out = CMatrix::zeros(d, d);
    for &(w, v) in ensemble {
        if v.len() != register.total_dim() {
            return Err(HilbertError::DimensionMismatch { expected: register.total_dim(), got: v.len() });
        }
        for &b in map.bases() {
            for i in 0..d {
                let vi = v[b + offs[i]] * w;
                if vi == C64::new(0.0, 0.0) {
                    continue;
                }
                for j in 0..d {
                    out[(i, j)] += vi * v[b + offs[j]].conj();
                }
            }
        }
    }
    Ok(MixedState::from_raw(sub, out))
}

/// Uhlmann fidelity `[tr sqrt(sqrt(sigma) rho sqrt(sigma))]^2`.
pub fn uhlmann_fidelity(rho: &MixedState, sigma: &MixedState) -> HilbertResult<f64> {
    uhlmann_fidelity_matrices(rho.matrix(), sigma.matrix())
}

pub(crate) fn uhlmann_fidelity_matrices(rho: &CMatrix, sigma: &CMatrix) -> HilbertResult<f64> {
    if rho.nrows() != sigma.nrows() {
        return Err(HilbertError::DimensionMismatch { expected: sigma.nrows(), got: rho.nrows() });
    }
    let root = psd_sqrt(sigma)?;
    let inner = &root * rho * &root;
    let (vals, _) = hermitian_eigen(&hermitize(&inner));
    let mut tr = 0.0;
    for v in vals.iter() {
        if *v < -PSD_CLAMP {
            return Err(HilbertError::NotPsd(*v));
        }
        tr += v.max(0.0).sqrt();
    }
    Ok((tr * tr).clamp(0.0, 1.0))
}

/// Principal square root of a PSD Hermitian matrix, with the eigenvalue clamp.
pub fn psd_sqrt(m: &CMatrix) -> HilbertResult<CMatrix> {
    let (vals, vecs) = hermitian_eigen(&hermitize(m));
    let mut scaled = vecs.clone();
    for (k, v) in vals.iter().enumerate() {
        if *v < -PSD_CLAMP {
            return Err(HilbertError::NotPsd(*v));
        }
        let s = v.max(0.0).sqrt();
        scaled.column_mut(k).scale_mut(s);
    }
    Ok(scaled * vecs.adjoint())
}

/// Largest absolute entry of `m - m^dagger`.
pub fn hermitian_deviation(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut dev: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            dev = dev.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    dev
}

pub(crate) fn hermitize(m: &CMatrix) -> CMatrix { (m + m.adjoint()).unscale(2.0) }

/// Eigen-decomposition of a Hermitian matrix with eigenvalues sorted
/// ascending; eigenvectors are the matching columns.
pub fn hermitian_eigen(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let eig = hermitize(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let n = m.nrows();
    let mut vecs = CMatrix::zeros(n, n);
    for (k, &src) in order.iter().enumerate() {
        vecs.set_column(k, &eig.eigenvectors.column(src));
    }
    (order.iter().map(|&k| eig.eigenvalues[k]).collect(), vecs)
}

/// Orthonormal eigenbasis of a Hermitian `h` split into the ground space
/// (eigenvalues within `tol * range` of the minimum) and its complement.
#[derive(Clone, Debug)]
pub struct SpectralSplit {
    pub ground: Vec<CVector>,
    pub excited: Vec<CVector>,
    /// Eigenvalues shifted so that the minimum is zero, ascending.
    pub shifted_eigenvalues: Vec<f64>,
}

impl SpectralSplit {
    /// Columns are the ground vectors.
    pub fn ground_matrix(&self) -> CMatrix { CMatrix::from_columns(&self.ground) }

    pub fn excited_matrix(&self) -> CMatrix { CMatrix::from_columns(&self.excited) }
}

pub fn kernel_and_complement(h: &CMatrix, tol: f64) -> HilbertResult<SpectralSplit> {
    if h.nrows() != h.ncols() {
        return Err(HilbertError::DimensionMismatch { expected: h.nrows(), got: h.ncols() });
    }
    let scale = h.iter().map(|z| z.norm()).fold(1.0, f64::max);
    let dev = hermitian_deviation(h);
    if dev > tol * scale {
        return Err(HilbertError::NotHermitian(dev));
    }
    let (vals, vecs) = hermitian_eigen(h);
    let min = vals[0];
    let range = vals[vals.len() - 1] - min;
    let cut = tol * range.max(f64::MIN_POSITIVE);
    let mut split = SpectralSplit { ground: vec![], excited: vec![], shifted_eigenvalues: vec![] };
    for (k, &v) in vals.iter().enumerate() {
        let col = vecs.column(k).clone_owned();
        if v - min <= cut {
            split.ground.push(col);
        } else {
            split.excited.push(col);
        }
        split.shifted_eigenvalues.push(v - min);
    }
    Ok(split)
}

/// Single-site operators in the `{|0>, |1>}` convention where `|1>` is the
/// excited level: `sigma_minus = |0><1|`, `sigma_plus = |1><0|`.
pub mod ops {
    use super::{CMatrix, C64};

    pub fn c(re: f64) -> C64 { C64::new(re, 0.0) }

    pub fn sigma_minus() -> CMatrix {
        CMatrix::from_row_slice(2, 2, &[c(0.0), c(1.0), c(0.0), c(0.0)])
    }

    pub fn sigma_plus() -> CMatrix {
        CMatrix::from_row_slice(2, 2, &[c(0.0), c(0.0), c(1.0), c(0.0)])
    }

    pub fn sigma_x() -> CMatrix {
        CMatrix::from_row_slice(2, 2, &[c(0.0), c(1.0), c(1.0), c(0.0)])
    }

    pub fn sigma_y() -> CMatrix {
        CMatrix::from_row_slice(2, 2, &[c(0.0), C64::new(0.0, -1.0), C64::new(0.0, 1.0), c(0.0)])
    }

    pub fn sigma_z() -> CMatrix {
        CMatrix::from_row_slice(2, 2, &[c(1.0), c(0.0), c(0.0), c(-1.0)])
    }

    /// `|a><a|` on a `dim`-level site.
    pub fn projector(dim: usize, a: usize) -> CMatrix {
        let mut m = CMatrix::zeros(dim, dim);
        m[(a, a)] = c(1.0);
        m
    }

    /// `|to><from|` on a `dim`-level site.
    pub fn transition(dim: usize, to: usize, from: usize) -> CMatrix {
        let mut m = CMatrix::zeros(dim, dim);
        m[(to, from)] = c(1.0);
        m
    }

    /// Two-site product in local ordering (first factor on the first listed
    /// site, which varies fastest).
    pub fn pair(first: &CMatrix, second: &CMatrix) -> CMatrix { second.kronecker(first) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ops::*;

    fn qubit(re0: f64, re1: f64) -> CVector { CVector::from_vec(vec![c(re0), c(re1)]) }

    #[test]
    fn register_rejects_bad_dims() {
        assert!(matches!(QuditRegister::new(vec![2, 4]), Err(HilbertError::BadLocalDim { site: 1, dim: 4 })));
        assert!(matches!(QuditRegister::new(vec![]), Err(HilbertError::EmptyRegister)));
        assert!(matches!(QuditRegister::qutrits(8), Err(HilbertError::TooLarge(_))));
        let r = QuditRegister::new(vec![2, 3, 2]).unwrap();
        assert_eq!(r.total_dim(), 12);
        assert_eq!(r.index_of(&r.digits(7)), 7);
        assert_eq!(r.digits(1), vec![1, 0, 0]);
    }

    #[test]
    fn embed_identity_and_lowering() {
        let r = QuditRegister::qubits(2).unwrap();
        let id = embed(&LocalOperator::new(vec![0], CMatrix::identity(2, 2)).unwrap(), &r).unwrap();
        assert_eq!(id, CMatrix::identity(4, 4));

        let full = embed(&LocalOperator::new(vec![1], sigma_minus()).unwrap(), &r).unwrap();
        // |11> has index 3, |10> (site0 = 1, site1 = 0) has index 1
        let out = &full * PureState::basis(r.clone(), 3).unwrap().amplitudes();
        assert_abs_diff_eq!(out[1].re, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.norm(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn embed_errors() {
        let r = QuditRegister::qubits(2).unwrap();
        let bad_site = LocalOperator::new(vec![2], sigma_minus()).unwrap();
        assert!(matches!(embed(&bad_site, &r), Err(HilbertError::SiteOutOfRange { .. })));
        let bad_dim = LocalOperator::new(vec![0], CMatrix::identity(3, 3)).unwrap();
        assert!(matches!(embed(&bad_dim, &r), Err(HilbertError::DimensionMismatch { .. })));
    }

    #[test]
    fn infidelity_examples() {
        let r = QuditRegister::qubits(1).unwrap();
        let zero = PureState::basis(r.clone(), 0).unwrap();
        let one = PureState::basis(r.clone(), 1).unwrap();
        let plus = PureState::normalized(r.clone(), qubit(1.0, 1.0)).unwrap();
        assert_abs_diff_eq!(infidelity(&zero.clone().into(), &zero).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(infidelity(&one.into(), &zero).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(infidelity(&plus.into(), &zero).unwrap(), 0.5, epsilon = 1e-15);
        let other = PureState::basis(QuditRegister::qubits(2).unwrap(), 0).unwrap();
        assert_eq!(infidelity(&other.into(), &zero), Err(HilbertError::RegisterMismatch));
    }

    #[test]
    fn reduced_examples() {
        let prod = PureState::product(&[qubit(1.0, 0.0), qubit(0.0, 1.0)]).unwrap();
        let r0 = reduced_density_matrix(&prod.into(), &[0]).unwrap();
        assert_abs_diff_eq!(r0.matrix()[(0, 0)].re, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r0.matrix()[(1, 1)].re, 0.0, epsilon = 1e-15);

        let r = QuditRegister::qubits(2).unwrap();
        let bell = PureState::normalized(r, CVector::from_vec(vec![c(1.0), c(0.0), c(0.0), c(1.0)])).unwrap();
        let rb = reduced_density_matrix(&bell.clone().into(), &[1]).unwrap();
        assert_abs_diff_eq!(rb.matrix()[(0, 0)].re, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(rb.matrix()[(1, 1)].re, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(rb.matrix()[(0, 1)].norm(), 0.0, epsilon = 1e-15);
        assert_eq!(reduced_density_matrix(&bell.into(), &[]).unwrap_err(), HilbertError::EmptySubsystem);
    }

    #[test]
    fn uhlmann_examples() {
        let r = QuditRegister::qubits(1).unwrap();
        let diag = |a: f64| {
            MixedState::new(r.clone(), CMatrix::from_diagonal(&CVector::from_vec(vec![c(a), c(1.0 - a)]))).unwrap()
        };
        assert_abs_diff_eq!(uhlmann_fidelity(&diag(0.3), &diag(0.3)).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(uhlmann_fidelity(&diag(1.0), &diag(0.0)).unwrap(), 0.0, epsilon = 1e-12);
        let expected = (0.28f64.sqrt() + 0.18f64.sqrt()).powi(2);
        assert_abs_diff_eq!(uhlmann_fidelity(&diag(0.7), &diag(0.4)).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn uhlmann_rejects_negative() {
        let m = CMatrix::from_diagonal(&CVector::from_vec(vec![c(1.1), c(-0.1)]));
        let good = CMatrix::identity(2, 2).unscale(2.0);
        assert!(matches!(uhlmann_fidelity_matrices(&good, &m), Err(HilbertError::NotPsd(_))));
    }

    #[test]
    fn kernel_of_projector() {
        let p = projector(3, 1) + projector(3, 2);
        let split = kernel_and_complement(&p, KERNEL_TOL).unwrap();
        assert_eq!(split.ground.len(), 1);
        assert_eq!(split.excited.len(), 2);
        assert_abs_diff_eq!(split.ground[0][0].norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn kernel_rejects_non_hermitian() {
        let m = sigma_minus();
        assert!(matches!(kernel_and_complement(&m, KERNEL_TOL), Err(HilbertError::NotHermitian(_))));
    }

    #[test]
    fn mixed_state_validation() {
        let r = QuditRegister::qubits(1).unwrap();
        assert!(MixedState::new(r.clone(), CMatrix::identity(2, 2)).is_err());
        assert!(matches!(MixedState::new(r.clone(), sigma_minus() + CMatrix::identity(2, 2).unscale(2.0)), Err(HilbertError::NotHermitian(_))));
        let neg = CMatrix::from_diagonal(&CVector::from_vec(vec![c(1.5), c(-0.5)]));
        assert!(matches!(MixedState::new(r, neg), Err(HilbertError::NotPsd(_))));
    }

    #[test]
    fn pair_ordering_matches_embedding() {
        // sigma- on site 0 tensored with identity on site 1, as a two-site op on (0, 1)
        let r = QuditRegister::qubits(2).unwrap();
        let op = LocalOperator::new(vec![0, 1], pair(&sigma_minus(), &CMatrix::identity(2, 2))).unwrap();
        let single = LocalOperator::new(vec![0], sigma_minus()).unwrap();
        assert_eq!(embed(&op, &r).unwrap(), embed(&single, &r).unwrap());
    }
}
