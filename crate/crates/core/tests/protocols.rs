mod common;

use std::sync::Arc;

use common::*;
use rand::Rng;
use steer_core::couplings::{product_family, single_qubit_family, w_state_family};
use steer_core::harness::{
    emit_outputs, runs_csv, single_qubit_passive_runtime, with_threads, InitialStateSpec,
};
use steer_core::policies::{partial_termination, passive_cyclic, qsm_plan_policy, CostEvaluator};
use steer_core::qsm::{build_steering_graph_from_operators, coarse_grain, plan_route};
use steer_core::steering::blind_map;
use steer_core::{
    rng_from_seed, run_experiment, run_protocol, trajectory_seed, Basis, CostFunction, ExperimentConfig, MixedState,
    Policy, PolicySpec, ProtocolOptions, PureState, QuantumState, RecordMode, TargetSpec,
};

const DT: f64 = 0.1;

fn runtimes(initial: &QuantumState, target: &PureState, mut policy: impl FnMut() -> Box<dyn Policy>, eps: f64, n: usize, arm: u64) -> Vec<f64> {
    let opts = ProtocolOptions::new(DT, eps).with_record(RecordMode::Summary);
    (0..n)
        .map(|i| {
            let mut p = policy();
            let rec = run_protocol(initial.clone(), target, p.as_mut(), &opts, trajectory_seed(77, arm, i as u64)).unwrap();
            assert!(rec.terminated);
            rec.runtime as f64
        })
        .collect()
}

/// Two-sample Kolmogorov-Smirnov statistic.
fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// Partial termination replayed on independent classical sites: each site is
/// excited with probability 1/2 and clicks with probability `(gamma dt)^2`
/// per own cycle; the observer's posterior follows the no-click filter.
fn independent_sites_runtime(n: usize, eps: f64, seed: u64) -> f64 {
    let p = DT * DT;
    let k = (1.0 - p / 2.0).powi(2);
    let mut rng = rng_from_seed(seed);
    let excited: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
    let mut q = vec![1.0f64; n];
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut next = 0;
    let infidelity = |q: &[f64]| 1.0 - q.iter().map(|&x| 1.0 / (1.0 + x)).product::<f64>();
    let mut t = 0;
    while infidelity(&q) >= eps {
        let pos = next % remaining.len();
        let s = remaining[pos];
        if excited[s] && rng.random::<f64>() < p {
            q[s] = 0.0;
            remaining.remove(pos);
            next = pos;
        } else {
            q[s] *= k;
            next = pos + 1;
        }
        t += 1;
    }
    t as f64
}

#[test]
fn partial_termination_matches_independent_sites() {
    let (n, eps, runs) = (2, 0.01, 10_000);
    let fam = product_family(n, 1.0).unwrap();
    let initial: QuantumState = MixedState::maximally_mixed(fam.register.clone()).into();
    let sim = runtimes(&initial, &fam.target, || Box::new(partial_termination(&fam).unwrap()), eps, runs, 1);
    let reference: Vec<f64> = (0..runs).map(|i| independent_sites_runtime(n, eps, trajectory_seed(78, 0, i as u64))).collect();
    let d = ks_statistic(&sim, &reference);
    let crit = 1.628 * ((2 * runs) as f64 / (runs * runs) as f64).sqrt();
    assert!(d < crit, "KS statistic {d} exceeds {crit} (means {} vs {})", mean(&sim), mean(&reference));
}

#[test]
fn single_qubit_mean_is_statistically_consistent() {
    let fam = Arc::new(single_qubit_family(1.0).unwrap());
    let initial: QuantumState = MixedState::maximally_mixed(fam.register.clone()).into();
    let (_, analytic) = single_qubit_passive_runtime(1.0, DT, 0.01);
    let (metas, runs) = (100, 200);
    let mut covered = 0;
    for m in 0..metas {
        let xs = runtimes(&initial, &fam.target, || Box::new(passive_cyclic(fam.clone()).unwrap()), 0.01, runs, 1000 + m);
        let mu = mean(&xs);
        let sd = (xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (runs - 1) as f64).sqrt();
        if (mu - analytic).abs() <= 1.96 * sd / (runs as f64).sqrt() {
            covered += 1;
        }
    }
    assert!(covered >= 90, "{covered}/100 meta-experiments cover the analytic mean {analytic}");
}

#[test]
fn ladder_plan_halves_alternation_runtime() {
    let ops = [("V1", tr(3, 1, 0)), ("V2", tr(3, 2, 1))];
    let fam = Arc::new(qudit_family(&ops, 2));
    let named: Vec<(String, _)> = ops.iter().map(|(id, m)| (id.to_string(), m.clone())).collect();
    let g = build_steering_graph_from_operators(&named, &Basis::standard(3), fam.target.amplitudes(), DT).unwrap();
    let cg = coarse_grain(&g);
    let plan = plan_route(&cg, 0, cg.target_block).unwrap();
    let initial: QuantumState = PureState::basis(fam.register.clone(), 0).unwrap().into();
    let planned = runtimes(&initial, &fam.target, || Box::new(qsm_plan_policy(&plan, &fam).unwrap()), 1e-3, 2000, 2);
    let passive = runtimes(&initial, &fam.target, || Box::new(passive_cyclic(fam.clone()).unwrap()), 1e-3, 2000, 3);
    let (tp, ta) = (mean(&passive), mean(&planned));
    assert!((ta - plan.estimated_cost).abs() < 0.1 * plan.estimated_cost, "planned {ta} vs {}", plan.estimated_cost);
    let f = tp / ta;
    assert!((f - 2.0).abs() < 0.2, "speedup {f}");
}

#[test]
fn w_landscape_is_flat_from_all_excited() {
    let fam = w_state_family().unwrap();
    let start: QuantumState = PureState::basis(fam.register.clone(), 7).unwrap().into();
    let eval = CostEvaluator::new(CostFunction::FullInfidelity, &fam.target).unwrap();
    for c in fam.members().unwrap() {
        let v = eval.blind_cost(&start, c, DT).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{}: {v}", c.id());
    }
}

#[test]
fn blind_steps_never_lose_fidelity() {
    let fam = Arc::new(w_state_family().unwrap());
    let eval = CostEvaluator::new(CostFunction::FullInfidelity, &fam.target).unwrap();
    let opts = ProtocolOptions::new(DT, 1e-3).with_max_cycles(400);
    let mut policy = passive_cyclic(fam.clone()).unwrap();
    let start: QuantumState = PureState::basis(fam.register.clone(), 7).unwrap().into();
    let rec = run_protocol(start.clone(), &fam.target, &mut policy, &opts, 5).unwrap();
    // replay the record to visit reachable states
    let mut state = start;
    for step in rec.steps.iter().take(300) {
        let c = fam.member_by_id(&step.coupling).unwrap();
        let before = eval.state_cost(&state).unwrap();
        for cand in fam.members().unwrap() {
            let after = eval.blind_cost(&state, cand, DT).unwrap();
            assert!(after <= before + 1e-12, "{} raised cost {before} -> {after}", cand.id());
            let mixed: QuantumState = state.to_density().into();
            let blind: QuantumState = blind_map(&mixed, cand, DT).unwrap().into();
            assert!(1.0 - blind.fidelity_to(&fam.target).unwrap() <= before + 1e-12);
        }
        state = steer_core::steering::apply_readout(&state, &c, DT, step.readout, steer_core::Backend::Weak).unwrap().posterior;
    }
}

#[test]
fn outputs_are_byte_identical_across_threads() {
    let mut cfg = ExperimentConfig::new(TargetSpec::WState, PolicySpec::greedy());
    cfg.n_runs = 24;
    cfg.master_seed = 99;
    let a = with_threads(Some(1), || run_experiment(&cfg)).unwrap().unwrap();
    let b = with_threads(Some(3), || run_experiment(&cfg)).unwrap().unwrap();
    assert_eq!(runs_csv(&a), runs_csv(&b));
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let f1 = emit_outputs(&a, d1.path(), "w").unwrap();
    let f2 = emit_outputs(&b, d2.path(), "w").unwrap();
    for (x, y) in f1.iter().zip(&f2) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn seeds_change_outputs() {
    let mut cfg = ExperimentConfig::new(TargetSpec::SingleQubit, PolicySpec::Passive);
    cfg.n_runs = 20;
    let a = run_experiment(&cfg).unwrap();
    cfg.master_seed = 1;
    let b = run_experiment(&cfg).unwrap();
    assert_ne!(runs_csv(&a), runs_csv(&b));
}

#[test]
fn haar_product_initial_state_is_seeded() {
    let mut cfg = ExperimentConfig::new(TargetSpec::Aklt, PolicySpec::Passive);
    cfg.n_sites = Some(3);
    cfg.n_runs = 2;
    cfg.max_cycles = 5;
    cfg.initial_state = InitialStateSpec::HaarProduct { seed: 4 };
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(runs_csv(&a), runs_csv(&b));
    assert!(a.runs.iter().all(|r| r.final_infidelity > 0.0 && r.final_infidelity < 1.0));
}
