//! Experiment configuration, parallel Monte Carlo execution, runtime
//! statistics, paired speedups, surveys and file output.
//!
//! Every trajectory seed is `trajectory_seed(master_seed, arm, index)` and
//! results are collected in index order, so outputs do not depend on the
//! number of worker threads.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::couplings::{
    aklt_tensor, graph_state_family, mps_family, mps_target, parent_hamiltonian, product_family, random_mps_tensor,
    single_qubit_family, w_state_family, CouplingError, CouplingFamily, GaussianKind, MpsTensor, ParentSampling,
};
use crate::hilbert::{HilbertError, MixedState, PureState, QuantumState};
use crate::policies::{
    corrupt_with_failure, greedy, partial_termination, passive_cyclic, qsm_plan_policy, CostFunction, Policy,
    PolicyError, DEFAULT_CANDIDATES_PER_SITE,
};
use crate::qsm::{block_of_state, build_steering_graph, coarse_grain, plan_route, w_basis, Basis, QsmError, RoutePlan};
use crate::rng::{rng_from_seed, trajectory_seed};
use crate::steering::{
    blind_map, run_protocol, Backend, FamilyTag, ProtocolOptions, RecordMode, SteeringError, TrajectoryRecord,
    DEFAULT_MAX_CYCLES,
};

pub const CI_Z: f64 = 1.96;

/// Arm used to derive per-target seeds in surveys.
const SURVEY_ARM: u64 = 0x5eed;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("run {index}: {source}")]
    Run { index: usize, source: SteeringError },

    #[error("active runtime is zero; speedup undefined")]
    ZeroActiveRuntime,

    #[error(transparent)]
    Coupling(#[from] CouplingError),

    #[error(transparent)]
    Policy(#[from] PolicyError),

    #[error(transparent)]
    Qsm(#[from] QsmError),

    #[error(transparent)]
    Hilbert(#[from] HilbertError),

    #[error(transparent)]
    Steering(#[from] SteeringError),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Run { .. } => "run",
            HarnessError::ZeroActiveRuntime => "zero_active_runtime",
            HarnessError::Coupling(_) => "coupling",
            HarnessError::Policy(_) => "policy",
            HarnessError::Qsm(_) => "qsm",
            HarnessError::Hilbert(_) => "hilbert",
            HarnessError::Steering(_) => "steering",
            HarnessError::Io { .. } => "io",
            HarnessError::Json(_) => "json",
        }
    }
}

pub type HarnessResult<T> = Result<T, HarnessError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    SingleQubit,
    Product,
    WState,
    Aklt,
    RandomMps { seed: u64 },
    GraphState { edges: Vec<(usize, usize)> },
    CustomTensor { tensor: MpsTensor },
}

fn default_candidates() -> usize { DEFAULT_CANDIDATES_PER_SITE }

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Passive,
    PartialTermination,
    Greedy {
        #[serde(default = "default_cost")]
        cost: CostFunction,
        #[serde(default = "default_candidates")]
        candidates_per_site: usize,
    },
    QsmPlan,
    Corrupted { inner: Box<PolicySpec>, tau_err: usize },
}

fn default_cost() -> CostFunction { CostFunction::FullInfidelity }

impl PolicySpec {
    pub fn greedy() -> Self { PolicySpec::Greedy { cost: default_cost(), candidates_per_site: default_candidates() } }

    pub fn label(&self) -> String {
        match self {
            PolicySpec::Passive => "passive".into(),
            PolicySpec::PartialTermination => "partial_termination".into(),
            PolicySpec::Greedy { .. } => "greedy".into(),
            PolicySpec::QsmPlan => "qsm_plan".into(),
            PolicySpec::Corrupted { inner, tau_err } => format!("corrupted_{}_{}", inner.label(), tau_err),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialStateSpec {
    /// Maximally mixed for single-qubit and product targets, `|111>` for the
    /// W state, `|0...0>` otherwise.
    #[default]
    Default,
    MaximallyMixed,
    Basis { index: usize },
    UniformLevel { level: usize },
    /// Product of independent Haar-random single-site states.
    HaarProduct { seed: u64 },
    Target,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// File stem; defaults to the config name.
    #[serde(default)]
    pub stem: Option<String>,
    #[serde(default)]
    pub traces: bool,
}

fn default_dt() -> f64 { 0.1 }
fn default_epsilon() -> f64 { 0.01 }
fn default_gamma() -> f64 { 1.0 }
fn default_max_cycles() -> usize { DEFAULT_MAX_CYCLES }
fn default_runs() -> usize { 1000 }

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub target: TargetSpec,
    #[serde(default)]
    pub n_sites: Option<usize>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub policy: PolicySpec,
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    #[serde(default = "default_max_cycles")]
    pub max_cycles: usize,
    #[serde(default)]
    pub master_seed: u64,
    /// Seed-stream arm; paired comparisons give each side its own arm.
    #[serde(default)]
    pub arm: u64,
    #[serde(default)]
    pub backend: Backend,
    #[serde(default)]
    pub initial_state: InitialStateSpec,
    #[serde(default)]
    pub sampling: ParentSampling,
    /// Bootstrap resamples for a percentile CI of the mean (0 = off).
    #[serde(default)]
    pub bootstrap: usize,
    #[serde(default)]
    pub output: OutputSpec,
}

impl ExperimentConfig {
    pub fn new(target: TargetSpec, policy: PolicySpec) -> Self {
        Self {
            name: None,
            target,
            n_sites: None,
            dt: default_dt(),
            epsilon: default_epsilon(),
            gamma: default_gamma(),
            policy,
            n_runs: default_runs(),
            max_cycles: default_max_cycles(),
            master_seed: 0,
            arm: 0,
            backend: Backend::Weak,
            initial_state: InitialStateSpec::Default,
            sampling: ParentSampling::default(),
            bootstrap: 0,
            output: OutputSpec::default(),
        }
    }

    pub fn from_json(text: &str) -> HarnessResult<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> HarnessResult<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(HarnessError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(HarnessError::Config(format!("epsilon must lie in (0,1), got {}", self.epsilon)));
        }
        if self.n_runs == 0 {
            return Err(HarnessError::Config("n_runs must be at least 1".into()));
        }
        if self.max_cycles == 0 {
            return Err(HarnessError::Config("max_cycles must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(HarnessError::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }

    fn sites(&self, default: usize) -> usize { self.n_sites.unwrap_or(default) }

    pub fn stem(&self) -> String {
        self.output.stem.clone().or_else(|| self.name.clone()).unwrap_or_else(|| "experiment".into())
    }
}

/// Everything a trajectory needs, shared read-only across workers.
pub struct Prepared {
    pub family: Arc<CouplingFamily>,
    pub target: PureState,
    pub initial: QuantumState,
    pub plan: Option<RoutePlan>,
}

pub fn build_family(cfg: &ExperimentConfig) -> HarnessResult<CouplingFamily> {
    let fam = match &cfg.target {
        TargetSpec::SingleQubit => single_qubit_family(cfg.gamma)?,
        TargetSpec::Product => product_family(cfg.sites(4), cfg.gamma)?,
        TargetSpec::WState => w_state_family()?,
        TargetSpec::GraphState { edges } => graph_state_family(cfg.sites(3), edges, cfg.gamma)?,
        TargetSpec::Aklt => mps_family(&aklt_tensor(), cfg.sites(4), cfg.sampling)?,
        TargetSpec::RandomMps { seed } => {
            let n = cfg.sites(4);
            let (tensor, _) = random_mps_tensor(&mut rng_from_seed(*seed), n)?;
            mps_family(&tensor, n, cfg.sampling)?
        }
        TargetSpec::CustomTensor { tensor } => mps_family(tensor, cfg.sites(4), cfg.sampling)?,
    };
    Ok(fam)
}

fn initial_state(cfg: &ExperimentConfig, family: &CouplingFamily) -> HarnessResult<QuantumState> {
    let r = family.register.clone();
    let st: QuantumState = match &cfg.initial_state {
        InitialStateSpec::Default => match family.kind {
            FamilyTag::SingleQubit | FamilyTag::Product => MixedState::maximally_mixed(r).into(),
            FamilyTag::WState => PureState::basis(r.clone(), r.total_dim() - 1)?.into(),
            _ => PureState::uniform_level(r, 0)?.into(),
        },
        InitialStateSpec::MaximallyMixed => MixedState::maximally_mixed(r).into(),
        InitialStateSpec::Basis { index } => PureState::basis(r, *index)?.into(),
        InitialStateSpec::UniformLevel { level } => PureState::uniform_level(r, *level)?.into(),
        InitialStateSpec::HaarProduct { seed } => {
            let mut rng = rng_from_seed(*seed);
            let locals: Vec<_> =
                r.local_dims().iter().map(|&d| GaussianKind::Complex.matrix(d, 1, &mut rng).column(0).into_owned()).collect();
            PureState::product(&locals)?.into()
        }
        InitialStateSpec::Target => family.target.clone().into(),
    };
    Ok(st)
}

fn qsm_basis(family: &CouplingFamily) -> Basis {
    if family.kind == FamilyTag::WState {
        w_basis()
    } else {
        Basis::computational(&family.register)
    }
}

/// Route plan from the initial state's block to the target block.
pub fn plan_for(family: &CouplingFamily, initial: &QuantumState, dt: f64) -> HarnessResult<RoutePlan> {
    let basis = qsm_basis(family);
    let graph = build_steering_graph(family, &basis, dt)?;
    let coarse = coarse_grain(&graph);
    let start = match initial {
        QuantumState::Pure(p) => block_of_state(&coarse, &basis, p.amplitudes()),
        QuantumState::Mixed(_) => {
            return Err(HarnessError::Config("qsm_plan needs a pure initial state".into()));
        }
    };
    Ok(plan_route(&coarse, start, coarse.target_block)?)
}

fn needs_plan(spec: &PolicySpec) -> bool {
    match spec {
        PolicySpec::QsmPlan => true,
        PolicySpec::Corrupted { inner, .. } => needs_plan(inner),
        _ => false,
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> HarnessResult<Prepared> {
    cfg.validate()?;
    let family = build_family(cfg)?;
    let initial = initial_state(cfg, &family)?;
    let plan = if needs_plan(&cfg.policy) { Some(plan_for(&family, &initial, cfg.dt)?) } else { None };
    let target = family.target.clone();
    Ok(Prepared { family: Arc::new(family), target, initial, plan })
}

pub fn make_policy(spec: &PolicySpec, prep: &Prepared) -> HarnessResult<Box<dyn Policy>> {
    let fam = prep.family.clone();
    let p: Box<dyn Policy> = match spec {
        PolicySpec::Passive => Box::new(passive_cyclic(fam)?),
        PolicySpec::PartialTermination => Box::new(partial_termination(&fam)?),
        PolicySpec::Greedy { cost, candidates_per_site } => {
            // an empty subsystem list means single sites
            let cost = match cost {
                CostFunction::SubsystemInfidelity(s) if s.is_empty() => CostFunction::single_sites(fam.register.n_sites()),
                c => c.clone(),
            };
            Box::new(greedy(fam, cost, *candidates_per_site)?)
        }
        PolicySpec::QsmPlan => {
            let plan = prep.plan.as_ref().ok_or_else(|| HarnessError::Config("no route plan prepared".into()))?;
            Box::new(qsm_plan_policy(plan, &fam)?)
        }
        PolicySpec::Corrupted { inner, tau_err } => {
            Box::new(corrupt_with_failure(make_policy(inner, prep)?, fam, *tau_err)?)
        }
    };
    Ok(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_index: usize,
    pub seed: u64,
    pub tau: usize,
    pub terminated: bool,
    pub final_infidelity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub n_runs: usize,
    /// Mean over all runs; non-terminated runs count as `max_cycles`.
    pub tau_av: f64,
    pub std: f64,
    pub ci95: f64,
    pub non_terminated: usize,
    pub tau_av_terminated: Option<f64>,
    pub bootstrap_ci95: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub runs: Vec<RunSummary>,
    pub stats: RuntimeStats,
    #[serde(skip)]
    pub traces: Vec<Vec<f64>>,
}

impl ExperimentResult {
    pub fn runtimes(&self) -> Vec<f64> { self.runs.iter().map(|r| r.tau as f64).collect() }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Percentile bootstrap CI of the mean.
pub fn bootstrap_ci(xs: &[f64], resamples: usize, seed: u64) -> Option<(f64, f64)> {
    if xs.is_empty() || resamples == 0 {
        return None;
    }
    let mut rng = rng_from_seed(seed);
    let n = xs.len();
    let mut means: Vec<f64> =
        (0..resamples).map(|_| (0..n).map(|_| xs[rng.random_range(0..n)]).sum::<f64>() / n as f64).collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Some((at(0.025), at(0.975)))
}

pub fn runtime_stats(runs: &[RunSummary], bootstrap: usize, seed: u64) -> RuntimeStats {
    let taus: Vec<f64> = runs.iter().map(|r| r.tau as f64).collect();
    let (tau_av, std) = mean_std(&taus);
    let n = runs.len();
    let non_terminated = runs.iter().filter(|r| !r.terminated).count();
    let tau_av_terminated = (non_terminated > 0).then(|| {
        let t: Vec<f64> = runs.iter().filter(|r| r.terminated).map(|r| r.tau as f64).collect();
        mean_std(&t).0
    });
    RuntimeStats {
        n_runs: n,
        tau_av,
        std,
        ci95: if n > 0 { CI_Z * std / (n as f64).sqrt() } else { 0.0 },
        non_terminated,
        tau_av_terminated,
        bootstrap_ci95: bootstrap_ci(&taus, bootstrap, seed),
    }
}

fn run_all(cfg: &ExperimentConfig, prep: &Prepared) -> HarnessResult<Vec<TrajectoryRecord>> {
    let record = if cfg.output.traces { RecordMode::Full } else { RecordMode::Summary };
    let opts = ProtocolOptions::new(cfg.dt, cfg.epsilon)
        .with_max_cycles(cfg.max_cycles)
        .with_backend(cfg.backend)
        .with_record(record);
    (0..cfg.n_runs)
        .into_par_iter()
        .map(|i| {
            let seed = trajectory_seed(cfg.master_seed, cfg.arm, i as u64);
            let mut policy = make_policy(&cfg.policy, prep)?;
            run_protocol(prep.initial.clone(), &prep.target, policy.as_mut(), &opts, seed)
                .map_err(|source| HarnessError::Run { index: i, source })
        })
        .collect()
}

pub fn run_experiment(cfg: &ExperimentConfig) -> HarnessResult<ExperimentResult> {
    let prep = prepare(cfg)?;
    run_prepared(cfg, &prep)
}

pub fn run_prepared(cfg: &ExperimentConfig, prep: &Prepared) -> HarnessResult<ExperimentResult> {
    let records = run_all(cfg, prep)?;
    let runs: Vec<RunSummary> = records
        .iter()
        .enumerate()
        .map(|(i, r)| RunSummary {
            run_index: i,
            seed: r.seed,
            tau: r.runtime,
            terminated: r.terminated,
            final_infidelity: r.final_infidelity,
        })
        .collect();
    let traces = if cfg.output.traces { records.into_iter().map(|r| r.infidelity_trace).collect() } else { Vec::new() };
    let stats = runtime_stats(&runs, cfg.bootstrap, trajectory_seed(cfg.master_seed, cfg.arm, u64::MAX));
    if stats.non_terminated > 0 {
        log::warn!("{} of {} runs hit max_cycles = {}", stats.non_terminated, runs.len(), cfg.max_cycles);
    }
    Ok(ExperimentResult { config: cfg.clone(), runs, stats, traces })
}

/// Run on a dedicated pool of `threads` workers (`None` = all cores).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> HarnessResult<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub f: f64,
    pub ci95: f64,
}

/// `tau_pas / tau_act` with first-order propagation of both standard errors.
pub fn speedup(passive: &RuntimeStats, active: &RuntimeStats) -> HarnessResult<Speedup> {
    if active.tau_av <= 0.0 {
        return Err(HarnessError::ZeroActiveRuntime);
    }
    let f = passive.tau_av / active.tau_av;
    let rel = |s: &RuntimeStats| if s.tau_av > 0.0 { s.ci95 / CI_Z / s.tau_av } else { 0.0 };
    let sigma = f * (rel(passive).powi(2) + rel(active).powi(2)).sqrt();
    Ok(Speedup { f, ci95: CI_Z * sigma })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedResult {
    pub passive: ExperimentResult,
    pub active: ExperimentResult,
    pub speedup: Speedup,
}

/// Passive and active arms of `base` on disjoint seed streams.
pub fn run_paired(base: &ExperimentConfig, passive: PolicySpec, active: PolicySpec) -> HarnessResult<PairedResult> {
    let mut pc = base.clone();
    pc.policy = passive;
    pc.arm = 2 * base.arm;
    let mut ac = base.clone();
    ac.policy = active;
    ac.arm = 2 * base.arm + 1;
    let prep = prepare(&ac)?;
    let passive = run_prepared(&pc, &prep)?;
    let active = run_prepared(&ac, &prep)?;
    let speedup = speedup(&passive.stats, &active.stats)?;
    Ok(PairedResult { passive, active, speedup })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_sites: usize,
    pub tau_pas: f64,
    pub tau_act: f64,
    pub f: f64,
    pub ci95: f64,
}

pub fn size_sweep(
    base: &ExperimentConfig,
    sizes: &[usize],
    passive: &PolicySpec,
    active: &PolicySpec,
) -> HarnessResult<Vec<SweepRow>> {
    sizes
        .iter()
        .map(|&n| {
            let mut cfg = base.clone();
            cfg.n_sites = Some(n);
            let r = run_paired(&cfg, passive.clone(), active.clone())?;
            Ok(SweepRow {
                n_sites: n,
                tau_pas: r.passive.stats.tau_av,
                tau_act: r.active.stats.tau_av,
                f: r.speedup.f,
                ci95: r.speedup.ci95,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurveyConfig {
    pub n_targets: usize,
    pub n_runs: usize,
    /// System sizes at which each target is steered.
    pub sizes: Vec<usize>,
    pub seed: u64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_max_cycles")]
    pub max_cycles: usize,
    #[serde(default = "default_candidates")]
    pub candidates_per_site: usize,
    /// Size at which the parent-Hamiltonian gap is reported.
    #[serde(default = "default_gap_sites")]
    pub gap_sites: usize,
}

fn default_gap_sites() -> usize { 5 }

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurveyRow {
    pub target_seed: u64,
    pub gap: f64,
    pub sweep: Vec<SweepRow>,
}

/// Paired passive/greedy runs for `n_targets` random MPS targets; targets
/// whose tensor sampler gives up are logged and skipped.
pub fn random_mps_survey(sc: &SurveyConfig) -> HarnessResult<Vec<SurveyRow>> {
    if sc.n_targets == 0 || sc.n_runs == 0 || sc.sizes.is_empty() {
        return Err(HarnessError::Config("survey parameters must be positive".into()));
    }
    let mut rows = Vec::with_capacity(sc.n_targets);
    for k in 0..sc.n_targets {
        let target_seed = trajectory_seed(sc.seed, SURVEY_ARM, k as u64);
        let tensor = match random_mps_tensor(&mut rng_from_seed(target_seed), sc.gap_sites) {
            Ok((t, _)) => t,
            Err(e @ CouplingError::DegenerateFamily(_)) => {
                log::warn!("skipping survey target {k}: {e}");
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let gap = parent_hamiltonian(&mps_target(&tensor, sc.gap_sites)?)?.gap;
        let mut base = ExperimentConfig::new(TargetSpec::CustomTensor { tensor }, PolicySpec::Passive);
        base.dt = sc.dt;
        base.epsilon = sc.epsilon;
        base.max_cycles = sc.max_cycles;
        base.n_runs = sc.n_runs;
        base.master_seed = target_seed;
        let active = PolicySpec::Greedy { cost: default_cost(), candidates_per_site: sc.candidates_per_site };
        match size_sweep(&base, &sc.sizes, &PolicySpec::Passive, &active) {
            Ok(sweep) => rows.push(SurveyRow { target_seed, gap, sweep }),
            Err(HarnessError::Coupling(e @ CouplingError::DegenerateGroundSpace(_))) => {
                log::warn!("skipping survey target {k}: {e}");
            }
            Err(e) => return Err(e),
        }
        log::info!("survey target {}/{} done (gap {gap:.3})", k + 1, sc.n_targets);
    }
    Ok(rows)
}

/// Readout-averaged infidelity after each of `cycles` passive round-robin
/// cycles, starting with the initial value.
pub fn blind_infidelity_curve(family: &CouplingFamily, initial: &QuantumState, dt: f64, cycles: usize) -> HarnessResult<Vec<f64>> {
    let members = family.members().ok_or(PolicyError::GeneratedFamily)?;
    let mut rho = initial.to_density();
    let mut out = Vec::with_capacity(cycles + 1);
    out.push(crate::hilbert::infidelity(&rho.clone().into(), &family.target)?);
    for t in 0..cycles {
        let c = &members[t % members.len()];
        rho = blind_map(&rho.into(), c, dt)?.renormalized();
        out.push(crate::hilbert::infidelity(&rho.clone().into(), &family.target)?);
    }
    Ok(out)
}

/// Filtering cut-off and mean runtime of the non-blind passive protocol for
/// one qubit from the maximally mixed state: `tau_max` is the first cycle at
/// which a click-free record certifies infidelity below `epsilon`.
pub fn single_qubit_passive_runtime(gamma: f64, dt: f64, epsilon: f64) -> (f64, f64) {
    let p = (gamma * dt).powi(2);
    let k = (1.0 - p / 2.0).powi(2);
    let mut q = 1.0;
    let mut t = 0usize;
    while q / (1.0 + q) >= epsilon {
        q *= k;
        t += 1;
    }
    let tau_max = t as f64;
    (tau_max, (1.0 - (-p * tau_max).exp()) / (2.0 * p) + tau_max / 2.0)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

pub fn runs_csv(result: &ExperimentResult) -> String {
    let mut s = String::from("run_index,seed,tau,terminated,final_infidelity\n");
    for r in &result.runs {
        let _ = writeln!(s, "{},{},{},{},{:e}", r.run_index, r.seed, r.tau, r.terminated, r.final_infidelity);
    }
    s
}

pub fn traces_csv(result: &ExperimentResult) -> String {
    let mut s = String::from("run_index,cycle,infidelity\n");
    for (i, tr) in result.traces.iter().enumerate() {
        for (t, v) in tr.iter().enumerate() {
            let _ = writeln!(s, "{i},{t},{v:e}");
        }
    }
    s
}

pub fn write_file(path: &Path, contents: &str) -> HarnessResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, contents).map_err(io_err(path))
}

/// Writes `<stem>_runs.csv`, `<stem>_summary.json` and, when traces were
/// recorded, `<stem>_traces.csv`. Returns the written paths.
pub fn emit_outputs(result: &ExperimentResult, dir: &Path, stem: &str) -> HarnessResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    let runs = dir.join(format!("{stem}_runs.csv"));
    write_file(&runs, &runs_csv(result))?;
    out.push(runs);
    let summary = dir.join(format!("{stem}_summary.json"));
    let json = serde_json::json!({ "config": result.config, "stats": result.stats });
    write_file(&summary, &(serde_json::to_string_pretty(&json)? + "\n"))?;
    out.push(summary);
    if !result.traces.is_empty() {
        let traces = dir.join(format!("{stem}_traces.csv"));
        write_file(&traces, &traces_csv(result))?;
        out.push(traces);
    }
    Ok(out)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("n_sites,tau_pas,tau_act,f,ci95\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.n_sites, r.tau_pas, r.tau_act, r.f, r.ci95);
    }
    s
}

pub fn survey_csv(rows: &[SurveyRow]) -> String {
    let mut s = String::from("target_seed,gap,n_sites,tau_pas,tau_act,f,ci95\n");
    for row in rows {
        for r in &row.sweep {
            let _ = writeln!(s, "{},{},{},{},{},{},{}", row.target_seed, row.gap, r.n_sites, r.tau_pas, r.tau_act, r.f, r.ci95);
        }
    }
    s
}
