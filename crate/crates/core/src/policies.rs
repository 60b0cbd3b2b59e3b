//! Decision rules consulted before every cycle.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::couplings::{CouplingError, CouplingFamily};
use crate::hilbert::{
    embed, reduced_density_matrix, reduced_from_ensemble, uhlmann_fidelity_matrices, CMatrix,
    HilbertError, MixedState, PureState, QuantumState,
};
use crate::qsm::{Advance, RoutePlan};
use crate::rng::TrajRng;
use crate::steering::{blind_map, Coupling, Readout, SteeringError};

/// Costs within this distance of the minimum count as ties.
pub const TIE_TOL: f64 = 1e-12;

/// Commutator norm (relative to the operator norms) below which couplings
/// are treated as commuting.
pub const COMMUTE_TOL: f64 = 1e-10;

pub const DEFAULT_CANDIDATES_PER_SITE: usize = 20;

pub const DEFAULT_STAGE_BUDGET: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("couplings {0} and {1} do not commute")]
    NonCommutingFamily(String, String),

    #[error("plan stage {stage} exceeded its budget of {budget} cycles")]
    PlanStalled { stage: usize, budget: usize },

    #[error("coupling family is empty")]
    EmptyFamily,

    #[error("unknown coupling id {0}")]
    UnknownCoupling(String),

    #[error("policy needs a family with fixed members")]
    GeneratedFamily,

    #[error("domain error: {0}")]
    Domain(String),

    #[error(transparent)]
    Family(#[from] CouplingError),

    #[error(transparent)]
    Hilbert(#[from] HilbertError),

    #[error(transparent)]
    Steering(#[from] Box<SteeringError>),
}

impl From<SteeringError> for PolicyError {
    fn from(e: SteeringError) -> Self { Self::Steering(Box::new(e)) }
}

pub type PolicyResult<T> = Result<T, PolicyError>;

#[derive(Clone, Debug)]
pub enum PolicyDecision {
    Apply(Arc<Coupling>),
    Terminate,
}

/// What a policy may look at when deciding.
pub struct DecisionContext<'a> {
    pub state: &'a QuantumState,
    pub target: &'a PureState,
    /// Number of cycles already performed.
    pub cycle: usize,
    pub dt: f64,
    pub infidelity: f64,
}

pub trait Policy: Send {
    fn decide(&mut self, ctx: &DecisionContext<'_>, rng: &mut TrajRng) -> PolicyResult<PolicyDecision>;

    /// Called with the readout of the coupling returned by the last `decide`.
    fn observe(&mut self, _coupling: &Coupling, _readout: Readout) {}
}

/// Fixed round-robin over the family (fresh samples for generated families).
pub struct PassiveCyclic {
    family: Arc<CouplingFamily>,
    order: Vec<usize>,
}

impl PassiveCyclic {
    pub fn new(family: Arc<CouplingFamily>) -> PolicyResult<Self> {
        let order = (0..family.n_slots()).collect();
        Self::with_order(family, order)
    }

    pub fn with_order(family: Arc<CouplingFamily>, order: Vec<usize>) -> PolicyResult<Self> {
        if order.is_empty() {
            return Err(PolicyError::EmptyFamily);
        }
        if let Some(&bad) = order.iter().find(|&&k| k >= family.n_slots()) {
            return Err(PolicyError::Domain(format!("order entry {bad} out of range")));
        }
        Ok(Self { family, order })
    }
}

impl Policy for PassiveCyclic {
    fn decide(&mut self, ctx: &DecisionContext<'_>, rng: &mut TrajRng) -> PolicyResult<PolicyDecision> {
        let slot = self.order[ctx.cycle % self.order.len()];
        Ok(PolicyDecision::Apply(self.family.draw(slot, rng)?))
    }
}

pub fn passive_cyclic(family: Arc<CouplingFamily>) -> PolicyResult<PassiveCyclic> { PassiveCyclic::new(family) }

/// Round-robin over members that have not clicked yet.
pub struct PartialTermination {
    members: Vec<Arc<Coupling>>,
    remaining: Vec<usize>,
    next: usize,
    last: Option<usize>,
}

impl PartialTermination {
    pub fn new(family: &CouplingFamily) -> PolicyResult<Self> {
        let members = family.members().ok_or(PolicyError::GeneratedFamily)?.to_vec();
        if members.is_empty() {
            return Err(PolicyError::EmptyFamily);
        }
        check_commuting(&members)?;
        Ok(Self { remaining: (0..members.len()).collect(), members, next: 0, last: None })
    }

    pub fn remaining(&self) -> impl Iterator<Item = &Coupling> + '_ {
        self.remaining.iter().map(|&i| self.members[i].as_ref())
    }
}

fn check_commuting(members: &[Arc<Coupling>]) -> PolicyResult<()> {
    let fulls: Vec<CMatrix> = members.iter().map(|c| c.full_matrix()).collect();
    for i in 0..members.len() {
        for j in i + 1..members.len() {
            let comm = &fulls[i] * &fulls[j] - &fulls[j] * &fulls[i];
            let scale = (members[i].op_norm() * members[j].op_norm()).max(f64::MIN_POSITIVE);
            if comm.norm() > COMMUTE_TOL * scale {
                return Err(PolicyError::NonCommutingFamily(members[i].id().into(), members[j].id().into()));
            }
        }
    }
    Ok(())
}

impl Policy for PartialTermination {
    fn decide(&mut self, _ctx: &DecisionContext<'_>, _rng: &mut TrajRng) -> PolicyResult<PolicyDecision> {
        if self.remaining.is_empty() {
            self.last = None;
            return Ok(PolicyDecision::Terminate);
        }
        let pos = self.next % self.remaining.len();
        self.last = Some(pos);
        Ok(PolicyDecision::Apply(self.members[self.remaining[pos]].clone()))
    }

    fn observe(&mut self, _coupling: &Coupling, readout: Readout) {
        let Some(pos) = self.last.take() else { return };
        if readout == Readout::Click {
            self.remaining.remove(pos);
            self.next = pos;
        } else {
            self.next = pos + 1;
        }
    }
}

pub fn partial_termination(family: &CouplingFamily) -> PolicyResult<PartialTermination> { PartialTermination::new(family) }

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "subsystems")]
pub enum CostFunction {
    FullInfidelity,
    /// Sum over the listed subsystems of one minus the Uhlmann fidelity of
    /// the reduced states.
    SubsystemInfidelity(Vec<Vec<usize>>),
}

impl CostFunction {
    pub fn single_sites(n: usize) -> Self { Self::SubsystemInfidelity((0..n).map(|i| vec![i]).collect()) }
}

/// `sum_S [1 - F(target_S, state_S)]`.
pub fn subsystem_infidelity(state: &QuantumState, target: &PureState, subsystems: &[Vec<usize>]) -> PolicyResult<f64> {
    if subsystems.is_empty() {
        return Err(PolicyError::Domain("subsystem family is empty".into()));
    }
    let t: QuantumState = target.clone().into();
    let mut total = 0.0;
    for s in subsystems {
        let rt = reduced_density_matrix(&t, s)?;
        let rs = reduced_density_matrix(state, s)?;
        total += 1.0 - uhlmann_fidelity_matrices(rt.matrix(), rs.matrix())?;
    }
    Ok(total)
}

/// Cost evaluator with cached target marginals.
#[derive(Clone, Debug)]
pub struct CostEvaluator {
    cost: CostFunction,
    target: PureState,
    target_marginals: Vec<CMatrix>,
}

impl CostEvaluator {
    pub fn new(cost: CostFunction, target: &PureState) -> PolicyResult<Self> {
        let t: QuantumState = target.clone().into();
        let target_marginals = match &cost {
            CostFunction::FullInfidelity => Vec::new(),
            CostFunction::SubsystemInfidelity(s) => {
                if s.is_empty() {
                    return Err(PolicyError::Domain("subsystem family is empty".into()));
                }
                s.iter()
                    .map(|sub| reduced_density_matrix(&t, sub).map(MixedState::into_matrix))
                    .collect::<Result<_, _>>()?
            }
        };
        Ok(Self { cost, target: target.clone(), target_marginals })
    }

    pub fn cost(&self) -> &CostFunction { &self.cost }

    /// Cost of the readout-averaged posterior `K rho K^dagger + dt^2 V rho V^dagger`.
    pub fn blind_cost(&self, state: &QuantumState, coupling: &Coupling, dt: f64) -> PolicyResult<f64> {
        match (state, &self.cost) {
            (QuantumState::Pure(p), CostFunction::FullInfidelity) => {
                let psi = p.amplitudes();
                let t = self.target.amplitudes();
                let vpsi = coupling.apply(psi);
                let kpsi = coupling.apply_noclick(psi, dt);
                let f = t.dotc(&kpsi).norm_sqr() + dt * dt * t.dotc(&vpsi).norm_sqr();
                Ok(1.0 - f)
            }
            (QuantumState::Pure(p), CostFunction::SubsystemInfidelity(subs)) => {
                let psi = p.amplitudes();
                let vpsi = coupling.apply(psi);
                let kpsi = coupling.apply_noclick(psi, dt);
                let ens = [(1.0, &kpsi), (dt * dt, &vpsi)];
                let mut total = 0.0;
                for (s, rt) in subs.iter().zip(&self.target_marginals) {
                    let r = reduced_from_ensemble(p.register(), &ens, s)?;
                    total += 1.0 - uhlmann_fidelity_matrices(rt, r.matrix())?;
                }
                Ok(total)
            }
            (QuantumState::Mixed(_), _) => {
                let post: QuantumState = blind_map(state, coupling, dt)?.into();
                self.state_cost(&post)
            }
        }
    }

    pub fn state_cost(&self, state: &QuantumState) -> PolicyResult<f64> {
        match &self.cost {
            CostFunction::FullInfidelity => Ok(1.0 - state.fidelity_to(&self.target)?),
            CostFunction::SubsystemInfidelity(subs) => {
                let mut total = 0.0;
                for (s, rt) in subs.iter().zip(&self.target_marginals) {
                    let r = reduced_density_matrix(state, s)?;
                    total += 1.0 - uhlmann_fidelity_matrices(rt, r.matrix())?;
                }
                Ok(total)
            }
        }
    }
}

/// One-step argmin of the blind-posterior cost.
pub struct Greedy {
    family: Arc<CouplingFamily>,
    evaluator: CostEvaluator,
    candidates_per_site: usize,
    /// Costs of the last decision's candidates, for inspection.
    last_costs: Vec<f64>,
}

impl Greedy {
    pub fn new(family: Arc<CouplingFamily>, cost: CostFunction, candidates_per_site: usize) -> PolicyResult<Self> {
        if candidates_per_site == 0 {
            return Err(PolicyError::Domain("candidates_per_site must be at least 1".into()));
        }
        if family.n_slots() == 0 {
            return Err(PolicyError::EmptyFamily);
        }
        let evaluator = CostEvaluator::new(cost, &family.target)?;
        Ok(Self { family, evaluator, candidates_per_site, last_costs: Vec::new() })
    }

    pub fn last_costs(&self) -> &[f64] { &self.last_costs }

    fn candidates(&self, rng: &mut TrajRng) -> PolicyResult<Vec<Arc<Coupling>>> {
        Ok(match self.family.members() {
            Some(m) => m.to_vec(),
            None => {
                let mut out = Vec::with_capacity(self.family.n_slots() * self.candidates_per_site);
                for k in 0..self.family.n_slots() {
                    for _ in 0..self.candidates_per_site {
                        out.push(self.family.draw(k, rng)?);
                    }
                }
                out
            }
        })
    }
}

impl Policy for Greedy {
    fn decide(&mut self, ctx: &DecisionContext<'_>, rng: &mut TrajRng) -> PolicyResult<PolicyDecision> {
        let cands = self.candidates(rng)?;
        self.last_costs.clear();
        for c in &cands {
            self.last_costs.push(self.evaluator.blind_cost(ctx.state, c, ctx.dt)?);
        }
        let min = self.last_costs.iter().cloned().fold(f64::INFINITY, f64::min);
        let ties: Vec<usize> = (0..cands.len()).filter(|&i| self.last_costs[i] <= min + TIE_TOL).collect();
        let pick = if ties.len() == 1 { ties[0] } else { ties[rng.random_range(0..ties.len())] };
        Ok(PolicyDecision::Apply(cands[pick].clone()))
    }
}

pub fn greedy(family: Arc<CouplingFamily>, cost: CostFunction, candidates_per_site: usize) -> PolicyResult<Greedy> {
    Greedy::new(family, cost, candidates_per_site)
}

/// Executes a route plan stage by stage.
pub struct QsmPlanPolicy {
    stages: Vec<(Vec<Arc<Coupling>>, Advance, usize)>,
    stage: usize,
    in_stage: usize,
    pending: bool,
}

impl QsmPlanPolicy {
    pub fn new(plan: &RoutePlan, family: &CouplingFamily) -> PolicyResult<Self> {
        let members = family.members().ok_or(PolicyError::GeneratedFamily)?;
        let mut stages = Vec::with_capacity(plan.stages.len());
        for s in &plan.stages {
            if s.couplings.is_empty() && s.advance == Advance::UntilClick {
                return Err(PolicyError::EmptyFamily);
            }
            let cs = s
                .couplings
                .iter()
                .map(|id| {
                    members.iter().find(|c| c.id() == id).cloned().ok_or_else(|| PolicyError::UnknownCoupling(id.clone()))
                })
                .collect::<PolicyResult<Vec<_>>>()?;
            stages.push((cs, s.advance, s.budget));
        }
        Ok(Self { stages, stage: 0, in_stage: 0, pending: false })
    }

    pub fn stage(&self) -> usize { self.stage }
}

impl Policy for QsmPlanPolicy {
    fn decide(&mut self, _ctx: &DecisionContext<'_>, _rng: &mut TrajRng) -> PolicyResult<PolicyDecision> {
        let Some((cs, _, budget)) = self.stages.get(self.stage) else {
            self.pending = false;
            return Ok(PolicyDecision::Terminate);
        };
        if cs.is_empty() {
            return Ok(PolicyDecision::Terminate);
        }
        if self.in_stage >= *budget {
            return Err(PolicyError::PlanStalled { stage: self.stage, budget: *budget });
        }
        let c = cs[self.in_stage % cs.len()].clone();
        self.in_stage += 1;
        self.pending = true;
        Ok(PolicyDecision::Apply(c))
    }

    fn observe(&mut self, _coupling: &Coupling, readout: Readout) {
        if !std::mem::take(&mut self.pending) {
            return;
        }
        if let Some((_, Advance::UntilClick, _)) = self.stages.get(self.stage) {
            if readout == Readout::Click {
                self.stage += 1;
                self.in_stage = 0;
            }
        }
    }
}

pub fn qsm_plan_policy(plan: &RoutePlan, family: &CouplingFamily) -> PolicyResult<QsmPlanPolicy> {
    QsmPlanPolicy::new(plan, family)
}

/// `inner` for the first `tau_err` cycles, passive round-robin afterwards.
pub struct CorruptedPolicy {
    inner: Box<dyn Policy>,
    fallback: PassiveCyclic,
    tau_err: usize,
    inner_pending: bool,
}

impl Policy for CorruptedPolicy {
    fn decide(&mut self, ctx: &DecisionContext<'_>, rng: &mut TrajRng) -> PolicyResult<PolicyDecision> {
        self.inner_pending = ctx.cycle < self.tau_err;
        if self.inner_pending {
            self.inner.decide(ctx, rng)
        } else {
            self.fallback.decide(ctx, rng)
        }
    }

    fn observe(&mut self, coupling: &Coupling, readout: Readout) {
        if std::mem::take(&mut self.inner_pending) {
            self.inner.observe(coupling, readout);
        }
    }
}

pub fn corrupt_with_failure(inner: Box<dyn Policy>, family: Arc<CouplingFamily>, tau_err: usize) -> PolicyResult<CorruptedPolicy> {
    Ok(CorruptedPolicy { inner, fallback: PassiveCyclic::new(family)?, tau_err, inner_pending: false })
}

/// Effective speedup `f tau_act / (f tau_act - (f - 1) tau_err)` when the
/// active policy falls back to passive steering after `tau_err` cycles.
pub fn imperfect_speedup_estimate(f: f64, tau_act: f64, tau_err: f64) -> PolicyResult<f64> {
    if !(f >= 1.0 && f.is_finite()) {
        return Err(PolicyError::Domain(format!("speedup must be at least 1, got {f}")));
    }
    if !(tau_act > 0.0 && tau_act.is_finite()) {
        return Err(PolicyError::Domain(format!("tau_act must be positive, got {tau_act}")));
    }
    if !(0.0..=tau_act).contains(&tau_err) {
        return Err(PolicyError::Domain(format!("tau_err must lie in [0, tau_act], got {tau_err}")));
    }
    Ok(f * tau_act / (f * tau_act - (f - 1.0) * tau_err))
}

/// Commutator test used by partial termination, exposed for diagnostics.
pub fn commutator_norm(a: &Coupling, b: &Coupling) -> PolicyResult<f64> {
    let r = a.register();
    let fa = embed(a.operator(), r)?;
    let fb = embed(b.operator(), r)?;
    Ok((&fa * &fb - &fb * &fa).norm())
}
