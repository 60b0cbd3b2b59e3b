//! The measurement cycle: couple a detector qubit to a few system sites,
//! read it out, and update the system with the matching back-action.
//!
//! Two backends are provided. The weak backend applies the second-order maps
//! `V` (click) and `1 - dt^2 V^dagger V / 2` (no click). The exact backend
//! exponentiates the system-detector Hamiltonian `V sigma+_d + h.c.` on the
//! coupling's support and uses the resulting Kraus pair, which serves as an
//! oracle for the truncation.

use std::sync::atomic::{AtomicBool, Ordering as AtomicOrdering};
use std::sync::{Arc, OnceLock};

use num_complex::Complex64 as C64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hilbert::{
    hermitian_eigen, infidelity, CMatrix, CVector, HilbertError, LocalKernel, LocalOperator,
    MixedState, PureState, QuantumState, QuditRegister, SiteMap,
};
use crate::policies::{DecisionContext, Policy, PolicyDecision, PolicyError};
use crate::rng::{rng_from_seed, TrajRng};

/// Branch probabilities below this are treated as impossible readouts.
pub const ZERO_BRANCH: f64 = 1e-15;

/// Above this click probability the weak expansion is considered unreliable.
pub const WEAK_WARN: f64 = 0.5;

pub const DEFAULT_MAX_CYCLES: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SteeringError {
    #[error("readout {readout:?} has probability {probability:e}")]
    ZeroProbabilityBranch { readout: Readout, probability: f64 },

    #[error("click probability {0} exceeds 1: dt too large for the weak-measurement expansion")]
    WeakLimitViolated(f64),

    #[error("policy stopped at cycle {cycle} before reaching the target (infidelity {infidelity})")]
    PolicyExhausted { cycle: usize, infidelity: f64 },

    #[error("invalid protocol parameter: {0}")]
    InvalidParameter(String),

    #[error(transparent)]
    Hilbert(#[from] HilbertError),

    #[error(transparent)]
    Policy(#[from] PolicyError),
}

pub type SteeringResult<T> = Result<T, SteeringError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FamilyTag {
    SingleQubit,
    Product,
    GraphState,
    ParentHam,
    WState,
    Custom,
}

/// Construction parameters carried along with a coupling.
#[derive(Clone, Debug, PartialEq)]
pub enum CouplingParams {
    None,
    Site(usize),
    Bond(usize),
    /// Blocks of a parent-Hamiltonian coupling on bond `bond` in the local
    /// ground (`phi`) / excited (`theta`) eigenbasis: `w` maps excited to
    /// ground, `v` excited to excited, `u` ground to ground.
    Parent { bond: usize, w: CMatrix, v: CMatrix, u: CMatrix },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Readout {
    Click,
    NoClick,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Weak,
    Exact,
}

/// Kraus pair of the exact cycle on the coupling's local support:
/// `noclick = <0|U|0>` and `click = <1|U|0>` on the detector.
#[derive(Clone, Debug)]
pub struct ExactKraus {
    pub dt: f64,
    pub noclick: CMatrix,
    pub click: CMatrix,
    noclick_kernel: LocalKernel,
    click_kernel: LocalKernel,
}

/// A system operator `V` coupled to the detector, compiled for its register.
#[derive(Debug)]
pub struct Coupling {
    id: Arc<str>,
    operator: LocalOperator,
    family_tag: FamilyTag,
    params: CouplingParams,
    register: QuditRegister,
    v: LocalKernel,
    vdv: LocalKernel,
    vdv_local: CMatrix,
    op_norm: OnceLock<f64>,
    exact: OnceLock<ExactKraus>,
}

impl Clone for Coupling {
    fn clone(&self) -> Self {
        Self {
            id: self.id.clone(),
            operator: self.operator.clone(),
            family_tag: self.family_tag,
            params: self.params.clone(),
            register: self.register.clone(),
            v: self.v.clone(),
            vdv: self.vdv.clone(),
            vdv_local: self.vdv_local.clone(),
            op_norm: self.op_norm.clone(),
            exact: self.exact.clone(),
        }
    }
}

impl Coupling {
    pub fn new(
        id: impl Into<Arc<str>>,
        operator: LocalOperator,
        family_tag: FamilyTag,
        params: CouplingParams,
        register: &QuditRegister,
    ) -> SteeringResult<Self> {
        operator.validate(register)?;
        let map = Arc::new(SiteMap::new(register, operator.sites())?);
        Self::with_map(id, operator, family_tag, params, register, map)
    }

    /// Reuse a precomputed index map for the operator's sites.
    pub fn with_map(
        id: impl Into<Arc<str>>,
        operator: LocalOperator,
        family_tag: FamilyTag,
        params: CouplingParams,
        register: &QuditRegister,
        map: Arc<SiteMap>,
    ) -> SteeringResult<Self> {
        operator.validate(register)?;
        if !operator.matrix().iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(SteeringError::InvalidParameter("coupling operator has non-finite entries".into()));
        }
        let m = operator.matrix();
        let vdv_local = m.adjoint() * m;
        Ok(Self {
            id: id.into(),
            v: LocalKernel::with_map(map.clone(), m),
            vdv: LocalKernel::with_map(map, &vdv_local),
            vdv_local,
            operator,
            family_tag,
            params,
            register: register.clone(),
            op_norm: OnceLock::new(),
            exact: OnceLock::new(),
        })
    }

    pub fn id(&self) -> &str { &self.id }

    pub fn shared_id(&self) -> Arc<str> { self.id.clone() }

    pub fn operator(&self) -> &LocalOperator { &self.operator }

    pub fn family_tag(&self) -> FamilyTag { self.family_tag }

    pub fn params(&self) -> &CouplingParams { &self.params }

    pub fn register(&self) -> &QuditRegister { &self.register }

    /// Spectral norm of `V`.
    pub fn op_norm(&self) -> f64 {
        *self.op_norm.get_or_init(|| hermitian_eigen(&self.vdv_local).0.last().copied().unwrap_or(0.0).max(0.0).sqrt())
    }

    pub fn kernel(&self) -> &LocalKernel { &self.v }

    pub fn vdv_kernel(&self) -> &LocalKernel { &self.vdv }

    /// Full `V` as a `D x D` matrix.
    pub fn full_matrix(&self) -> CMatrix {
        let d = self.register.total_dim();
        self.v.apply_left(&CMatrix::identity(d, d))
    }

    pub fn apply(&self, psi: &CVector) -> CVector { self.v.apply(psi) }

    /// `(1 - dt^2 V^dagger V / 2) psi`.
    pub fn apply_noclick(&self, psi: &CVector, dt: f64) -> CVector {
        let mut out = self.vdv.apply(psi);
        let h = -0.5 * dt * dt;
        for (o, p) in out.iter_mut().zip(psi.iter()) {
            *o = p + *o * h;
        }
        out
    }

    fn apply_noclick_left(&self, rho: &CMatrix, dt: f64) -> CMatrix {
        rho - self.vdv.apply_left(rho) * C64::new(0.5 * dt * dt, 0.0)
    }

    /// The exact Kraus pair for `dt`, cached for the first `dt` requested.
    pub fn exact_kraus(&self, dt: f64) -> ExactKraus {
        if let Some(k) = self.exact.get() {
            if k.dt == dt {
                return k.clone();
            }
            return self.build_exact(dt);
        }
        let k = self.build_exact(dt);
        let _ = self.exact.set(k.clone());
        k
    }

    fn build_exact(&self, dt: f64) -> ExactKraus {
        let v = self.operator.matrix();
        let d = v.nrows();
        // detector-0 block first, then detector-1 block
        let mut h = CMatrix::zeros(2 * d, 2 * d);
        h.view_mut((d, 0), (d, d)).copy_from(v);
        h.view_mut((0, d), (d, d)).copy_from(&v.adjoint());
        let (vals, vecs) = hermitian_eigen(&h);
        let mut scaled = vecs.clone();
        for (k, l) in vals.iter().enumerate() {
            let col = vecs.column(k) * C64::from_polar(1.0, -l * dt);
            scaled.set_column(k, &col);
        }
        let u = scaled * vecs.adjoint();
        let noclick = u.view((0, 0), (d, d)).clone_owned();
        let click = u.view((d, 0), (d, d)).clone_owned();
        let map = self.v.map().clone();
        ExactKraus {
            dt,
            noclick_kernel: LocalKernel::with_map(map.clone(), &noclick),
            click_kernel: LocalKernel::with_map(map, &click),
            noclick,
            click,
        }
    }

    /// Local `V^dagger V`.
    pub fn vdv_local(&self) -> &CMatrix { &self.vdv_local }
}

/// Result of one cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleOutcome {
    pub readout: Readout,
    pub posterior: QuantumState,
    pub probability: f64,
}

/// Both readout branches of a cycle, without sampling.
#[derive(Clone, Debug)]
pub struct Branches {
    pub p_click: f64,
    pub p_noclick: f64,
    /// Unnormalized branch images (`M psi` or `M rho M^dagger`).
    pub click: BranchImage,
    pub noclick: BranchImage,
}

#[derive(Clone, Debug)]
pub enum BranchImage {
    Pure(CVector),
    Mixed(CMatrix),
}

impl BranchImage {
    fn normalize(self, register: &QuditRegister, p: f64, readout: Readout) -> SteeringResult<QuantumState> {
        match self {
            BranchImage::Pure(v) => {
                let n = v.norm();
                if n * n < ZERO_BRANCH {
                    return Err(SteeringError::ZeroProbabilityBranch { readout, probability: p });
                }
                Ok(PureState::new(register.clone(), v.unscale(n))?.into())
            }
            BranchImage::Mixed(m) => {
                let t = m.trace().re;
                if t < ZERO_BRANCH {
                    return Err(SteeringError::ZeroProbabilityBranch { readout, probability: p });
                }
                Ok(MixedState::from_raw(register.clone(), m.unscale(t)).into())
            }
        }
    }
}

static WARNED_WEAK: AtomicBool = AtomicBool::new(false);

fn check_inputs(state: &QuantumState, coupling: &Coupling, dt: f64) -> SteeringResult<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(SteeringError::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    if state.register() != coupling.register() {
        return Err(HilbertError::RegisterMismatch.into());
    }
    Ok(())
}

fn checked_click_probability(p: f64) -> SteeringResult<f64> {
    if p > 1.0 {
        return Err(SteeringError::WeakLimitViolated(p));
    }
    if p > WEAK_WARN && !WARNED_WEAK.swap(true, AtomicOrdering::Relaxed) {
        log::warn!("click probability {p:.3} per cycle: outside the weak-measurement regime");
    }
    Ok(p.clamp(0.0, 1.0))
}

/// `dt^2 tr(V rho V^dagger)`.
pub fn click_probability(state: &QuantumState, coupling: &Coupling, dt: f64) -> SteeringResult<f64> {
    check_inputs(state, coupling, dt)?;
    let raw = match state {
        QuantumState::Pure(p) => dt * dt * coupling.apply(p.amplitudes()).norm_squared(),
        QuantumState::Mixed(m) => dt * dt * coupling.vdv.apply_left(m.matrix()).trace().re,
    };
    checked_click_probability(raw)
}

/// Branches of the weak backend. Probabilities are `p_cl` and `1 - p_cl`.
pub fn weak_branches(state: &QuantumState, coupling: &Coupling, dt: f64) -> SteeringResult<Branches> {
    check_inputs(state, coupling, dt)?;
    Ok(match state {
        QuantumState::Pure(p) => {
            let psi = p.amplitudes();
            let vpsi = coupling.apply(psi);
            let p_click = checked_click_probability(dt * dt * vpsi.norm_squared())?;
            Branches {
                p_click,
                p_noclick: 1.0 - p_click,
                click: BranchImage::Pure(vpsi * C64::new(dt, 0.0)),
                noclick: BranchImage::Pure(coupling.apply_noclick(psi, dt)),
            }
        }
        QuantumState::Mixed(m) => {
            let rho = m.matrix();
            let vrv = coupling.v.sandwich(rho);
            let p_click = checked_click_probability(dt * dt * vrv.trace().re)?;
            let a = coupling.apply_noclick_left(rho, dt);
            let krk = coupling.apply_noclick_left(&a.adjoint(), dt).adjoint();
            Branches {
                p_click,
                p_noclick: 1.0 - p_click,
                click: BranchImage::Mixed(vrv * C64::new(dt * dt, 0.0)),
                noclick: BranchImage::Mixed(krk),
            }
        }
    })
}

/// Branches of the exact backend (Born-rule probabilities).
pub fn exact_branches(state: &QuantumState, coupling: &Coupling, dt: f64) -> SteeringResult<Branches> {
    check_inputs(state, coupling, dt)?;
    let k = coupling.exact_kraus(dt);
    Ok(match state {
        QuantumState::Pure(p) => {
            let c = k.click_kernel.apply(p.amplitudes());
            let n = k.noclick_kernel.apply(p.amplitudes());
            Branches {
                p_click: c.norm_squared(),
                p_noclick: n.norm_squared(),
                click: BranchImage::Pure(c),
                noclick: BranchImage::Pure(n),
            }
        }
        QuantumState::Mixed(m) => {
            let c = k.click_kernel.sandwich(m.matrix());
            let n = k.noclick_kernel.sandwich(m.matrix());
            Branches {
                p_click: c.trace().re,
                p_noclick: n.trace().re,
                click: BranchImage::Mixed(c),
                noclick: BranchImage::Mixed(n),
            }
        }
    })
}

/// Posterior after a click: `V rho V^dagger / tr(V rho V^dagger)`.
pub fn click_map(state: &QuantumState, coupling: &Coupling, dt: f64) -> SteeringResult<QuantumState> {
    let b = weak_branches(state, coupling, dt)?;
    if b.p_click < ZERO_BRANCH {
        return Err(SteeringError::ZeroProbabilityBranch { readout: Readout::Click, probability: b.p_click });
    }
    b.click.normalize(state.register(), b.p_click, Readout::Click)
}

/// Posterior after no click: `K rho K^dagger`, normalized by its own trace.
pub fn noclick_map(state: &QuantumState, coupling: &Coupling, dt: f64) -> SteeringResult<QuantumState> {
    let b = weak_branches(state, coupling, dt)?;
    if b.p_noclick < ZERO_BRANCH {
        return Err(SteeringError::ZeroProbabilityBranch { readout: Readout::NoClick, probability: b.p_noclick });
    }
    b.noclick.normalize(state.register(), b.p_noclick, Readout::NoClick)
}

/// Readout-averaged map `K rho K^dagger + dt^2 V rho V^dagger`. Its trace is
/// `1 + O(dt^4)`; it is not renormalized.
pub fn blind_map(state: &QuantumState, coupling: &Coupling, dt: f64) -> SteeringResult<MixedState> {
    let b = weak_branches(state, coupling, dt)?;
    let m = match (b.click, b.noclick) {
        (BranchImage::Pure(c), BranchImage::Pure(n)) => &c * c.adjoint() + &n * n.adjoint(),
        (BranchImage::Mixed(c), BranchImage::Mixed(n)) => c + n,
        _ => unreachable!("branches share the state representation"),
    };
    Ok(MixedState::from_raw(state.register().clone(), m))
}

/// Posterior and probability for a given readout.
pub fn apply_readout(
    state: &QuantumState,
    coupling: &Coupling,
    dt: f64,
    readout: Readout,
    backend: Backend,
) -> SteeringResult<CycleOutcome> {
    let b = match backend {
        Backend::Weak => weak_branches(state, coupling, dt)?,
        Backend::Exact => exact_branches(state, coupling, dt)?,
    };
    finish(state.register(), b, readout)
}

fn finish(register: &QuditRegister, b: Branches, readout: Readout) -> SteeringResult<CycleOutcome> {
    let (p, image) = match readout {
        Readout::Click => (b.p_click, b.click),
        Readout::NoClick => (b.p_noclick, b.noclick),
    };
    if p < ZERO_BRANCH {
        return Err(SteeringError::ZeroProbabilityBranch { readout, probability: p });
    }
    Ok(CycleOutcome { readout, posterior: image.normalize(register, p, readout)?, probability: p })
}

fn sample(register: &QuditRegister, b: Branches, rng: &mut TrajRng) -> SteeringResult<CycleOutcome> {
    let u: f64 = rng.random();
    let readout = if u < b.p_click { Readout::Click } else { Readout::NoClick };
    finish(register, b, readout)
}

/// One weak-backend cycle with a sampled readout.
pub fn weak_cycle(state: &QuantumState, coupling: &Coupling, dt: f64, rng: &mut TrajRng) -> SteeringResult<CycleOutcome> {
    let b = weak_branches(state, coupling, dt)?;
    sample(state.register(), b, rng)
}

/// One exact-backend cycle with a sampled readout.
pub fn exact_cycle(state: &QuantumState, coupling: &Coupling, dt: f64, rng: &mut TrajRng) -> SteeringResult<CycleOutcome> {
    let b = exact_branches(state, coupling, dt)?;
    sample(state.register(), b, rng)
}

pub fn cycle(
    state: &QuantumState,
    coupling: &Coupling,
    dt: f64,
    backend: Backend,
    rng: &mut TrajRng,
) -> SteeringResult<CycleOutcome> {
    match backend {
        Backend::Weak => weak_cycle(state, coupling, dt, rng),
        Backend::Exact => exact_cycle(state, coupling, dt, rng),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub coupling: Arc<str>,
    pub readout: Readout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordMode {
    /// Keep every step and the per-cycle infidelity.
    #[default]
    Full,
    /// Keep only runtime, termination flag and final infidelity.
    Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub seed: u64,
    /// One entry per cycle (empty in summary mode).
    pub steps: Vec<Step>,
    /// Infidelity before the first cycle and after each cycle (only the
    /// final value in summary mode).
    pub infidelity_trace: Vec<f64>,
    pub runtime: usize,
    pub terminated: bool,
    pub final_infidelity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolOptions {
    pub dt: f64,
    pub epsilon: f64,
    pub max_cycles: usize,
    pub backend: Backend,
    pub record: RecordMode,
}

impl ProtocolOptions {
    pub fn new(dt: f64, epsilon: f64) -> Self {
        Self { dt, epsilon, max_cycles: DEFAULT_MAX_CYCLES, backend: Backend::Weak, record: RecordMode::Full }
    }

    pub fn with_max_cycles(mut self, max_cycles: usize) -> Self {
        self.max_cycles = max_cycles;
        self
    }

    pub fn with_backend(mut self, backend: Backend) -> Self {
        self.backend = backend;
        self
    }

    pub fn with_record(mut self, record: RecordMode) -> Self {
        self.record = record;
        self
    }

    pub fn validate(&self) -> SteeringResult<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SteeringError::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(SteeringError::InvalidParameter(format!("epsilon must lie in (0,1), got {}", self.epsilon)));
        }
        if self.max_cycles == 0 {
            return Err(SteeringError::InvalidParameter("max_cycles must be at least 1".into()));
        }
        Ok(())
    }
}

/// Run cycles until the filtered state is within `epsilon` of the target or
/// `max_cycles` is reached.
pub fn run_protocol(
    initial: QuantumState,
    target: &PureState,
    policy: &mut dyn Policy,
    opts: &ProtocolOptions,
    seed: u64,
) -> SteeringResult<TrajectoryRecord> {
    opts.validate()?;
    let mut rng = rng_from_seed(seed);
    let full = opts.record == RecordMode::Full;
    let mut state = initial;
    let mut inf = infidelity(&state, target)?;
    let mut record = TrajectoryRecord {
        seed,
        steps: Vec::new(),
        infidelity_trace: if full { vec![inf] } else { Vec::new() },
        runtime: 0,
        terminated: false,
        final_infidelity: inf,
    };
    let mut t = 0;
    loop {
        if inf < opts.epsilon {
            record.terminated = true;
            break;
        }
        if t >= opts.max_cycles {
            break;
        }
        let ctx = DecisionContext { state: &state, target, cycle: t, dt: opts.dt, infidelity: inf };
        let coupling = match policy.decide(&ctx, &mut rng)? {
            PolicyDecision::Apply(c) => c,
            PolicyDecision::Terminate => {
                return Err(SteeringError::PolicyExhausted { cycle: t, infidelity: inf });
            }
        };
        let out = cycle(&state, &coupling, opts.dt, opts.backend, &mut rng)?;
        policy.observe(&coupling, out.readout);
        state = out.posterior;
        inf = infidelity(&state, target)?;
        t += 1;
        if full {
            record.steps.push(Step { coupling: coupling.shared_id(), readout: out.readout });
            record.infidelity_trace.push(inf);
        }
    }
    record.runtime = t;
    record.final_infidelity = inf;
    if !full {
        record.infidelity_trace.push(inf);
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::ops::*;
    use crate::hilbert::{embed, CVector};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn qubit_register() -> QuditRegister { QuditRegister::qubits(1).unwrap() }

    fn lowering(gamma: f64) -> Coupling {
        let op = LocalOperator::new(vec![0], sigma_minus() * c(gamma)).unwrap();
        Coupling::new("V", op, FamilyTag::SingleQubit, CouplingParams::None, &qubit_register()).unwrap()
    }

    fn excited() -> QuantumState { PureState::basis(qubit_register(), 1).unwrap().into() }

    fn plus() -> QuantumState {
        PureState::normalized(qubit_register(), CVector::from_vec(vec![c(1.0), c(1.0)])).unwrap().into()
    }

    #[test]
    fn click_probability_single_qubit() {
        let p = click_probability(&excited(), &lowering(2.0), 0.1).unwrap();
        assert_abs_diff_eq!(p, 0.04, epsilon = 1e-15);
        let ground: QuantumState = PureState::basis(qubit_register(), 0).unwrap().into();
        assert_eq!(click_probability(&ground, &lowering(2.0), 0.1).unwrap(), 0.0);
    }

    #[test]
    fn click_maps_to_ground() {
        for s in [excited(), plus()] {
            let post = click_map(&s, &lowering(1.0), 0.1).unwrap();
            let QuantumState::Pure(p) = post else { panic!() };
            assert_abs_diff_eq!(p.amplitudes()[0].norm(), 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn noclick_closed_form() {
        let (g, dt) = (1.0, 0.1);
        let QuantumState::Pure(p) = noclick_map(&plus(), &lowering(g), dt).unwrap() else { panic!() };
        let b = 1.0 - g * g * dt * dt / 2.0;
        let n = (1.0 + b * b).sqrt();
        assert_abs_diff_eq!(p.amplitudes()[0].re, 1.0 / n, epsilon = 1e-14);
        assert_abs_diff_eq!(p.amplitudes()[1].re, b / n, epsilon = 1e-14);
    }

    #[test]
    fn zero_branch_is_an_error() {
        let ground: QuantumState = PureState::basis(qubit_register(), 0).unwrap().into();
        assert!(matches!(
            click_map(&ground, &lowering(1.0), 0.1),
            Err(SteeringError::ZeroProbabilityBranch { readout: Readout::Click, .. })
        ));
    }

    #[test]
    fn weak_limit_violation() {
        assert!(matches!(click_probability(&excited(), &lowering(20.0), 0.1), Err(SteeringError::WeakLimitViolated(_))));
    }

    #[test]
    fn exact_single_qubit_closed_form() {
        let (g, dt) = (1.3, 0.2);
        let b = exact_branches(&excited(), &lowering(g), dt).unwrap();
        assert_abs_diff_eq!(b.p_click, (g * dt).sin().powi(2), epsilon = 1e-13);
        assert_abs_diff_eq!(b.p_click + b.p_noclick, 1.0, epsilon = 1e-13);
    }

    #[test]
    fn forced_click_outcome() {
        let out = apply_readout(&excited(), &lowering(1.0), 0.1, Readout::Click, Backend::Weak).unwrap();
        assert_abs_diff_eq!(out.probability, 0.01, epsilon = 1e-15);
        let QuantumState::Pure(p) = out.posterior else { panic!() };
        assert_abs_diff_eq!(p.amplitudes()[0].norm(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn mixed_and_pure_paths_agree() {
        let r = QuditRegister::qubits(2).unwrap();
        let m = pair(&sigma_minus(), &sigma_plus()) + pair(&projector(2, 1), &sigma_x()) * c(0.3);
        let cpl = Coupling::new("V", LocalOperator::new(vec![1, 0], m).unwrap(), FamilyTag::Custom, CouplingParams::None, &r).unwrap();
        let psi = PureState::normalized(r.clone(), CVector::from_vec(vec![c(0.2), C64::new(0.1, 0.5), c(-0.7), c(0.4)])).unwrap();
        let dt = 0.15;
        let pure: QuantumState = psi.clone().into();
        let mixed: QuantumState = psi.to_density().into();
        for readout in [Readout::Click, Readout::NoClick] {
            for backend in [Backend::Weak, Backend::Exact] {
                let a = apply_readout(&pure, &cpl, dt, readout, backend).unwrap();
                let b = apply_readout(&mixed, &cpl, dt, readout, backend).unwrap();
                assert_abs_diff_eq!(a.probability, b.probability, epsilon = 1e-13);
                let diff = a.posterior.to_density().matrix() - b.posterior.to_density().matrix();
                assert!(diff.norm() < 1e-12);
            }
        }
        let full = embed(cpl.operator(), &r).unwrap();
        assert!((cpl.full_matrix() - full).norm() < 1e-14);
    }

    #[test]
    fn run_protocol_zero_cycles_when_converged() {
        struct Never;
        impl Policy for Never {
            fn decide(&mut self, _: &DecisionContext<'_>, _: &mut TrajRng) -> Result<PolicyDecision, PolicyError> {
                Ok(PolicyDecision::Terminate)
            }
        }
        let target = PureState::basis(qubit_register(), 0).unwrap();
        let rec = run_protocol(target.clone().into(), &target, &mut Never, &ProtocolOptions::new(0.1, 0.01), 3).unwrap();
        assert_eq!(rec.runtime, 0);
        assert!(rec.terminated);
        let err = run_protocol(excited(), &target, &mut Never, &ProtocolOptions::new(0.1, 0.01), 3).unwrap_err();
        assert!(matches!(err, SteeringError::PolicyExhausted { cycle: 0, .. }));
    }

    #[test]
    fn sampling_is_deterministic() {
        let c = lowering(1.0);
        let mut a = TrajRng::seed_from_u64(9);
        let mut b = TrajRng::seed_from_u64(9);
        for _ in 0..200 {
            let x = weak_cycle(&plus(), &c, 0.3, &mut a).unwrap().readout;
            let y = weak_cycle(&plus(), &c, 0.3, &mut b).unwrap().readout;
            assert_eq!(x, y);
        }
    }
}
