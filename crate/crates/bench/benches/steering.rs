use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use steer_bench::{aklt, level_zero, w};
use steer_core::policies::{greedy, DecisionContext, Policy};
use steer_core::qsm::{build_steering_graph, coarse_grain, plan_route, w_basis};
use steer_core::steering::cycle;
use steer_core::{infidelity, rng_from_seed, Backend, CostFunction, PureState, QuantumState};

const DT: f64 = 0.1;

fn bench_cycle(c: &mut Criterion) {
    let fam = aklt(5);
    let state = level_zero(&fam);
    let mut rng = rng_from_seed(1);
    let cpl = fam.draw(0, &mut rng).unwrap();
    let mut g = c.benchmark_group("cycle_aklt5");
    for backend in [Backend::Weak, Backend::Exact] {
        g.bench_function(format!("{backend:?}"), |b| {
            b.iter(|| cycle(black_box(&state), &cpl, DT, backend, &mut rng).unwrap())
        });
    }
    g.finish();
    c.bench_function("draw_parent_coupling_aklt5", |b| b.iter(|| fam.draw(2, &mut rng).unwrap()));
}

fn bench_kernel(c: &mut Criterion) {
    let fam = aklt(6);
    let state = level_zero(&fam);
    let mut rng = rng_from_seed(2);
    let cpl = fam.draw(3, &mut rng).unwrap();
    let psi = match &state {
        QuantumState::Pure(p) => p.amplitudes().clone(),
        QuantumState::Mixed(_) => unreachable!(),
    };
    c.bench_function("local_apply_aklt6", |b| b.iter(|| cpl.apply(black_box(&psi))));
    c.bench_function("noclick_apply_aklt6", |b| b.iter(|| cpl.apply_noclick(black_box(&psi), DT)));
}

fn decide_bench(c: &mut Criterion, name: &str, fam: std::sync::Arc<steer_core::CouplingFamily>, state: QuantumState, m: usize) {
    let target: PureState = fam.target.clone();
    let inf = infidelity(&state, &target).unwrap();
    let mut policy = greedy(fam, CostFunction::FullInfidelity, m).unwrap();
    let mut rng = rng_from_seed(3);
    c.bench_function(name, |b| {
        b.iter(|| {
            let ctx = DecisionContext { state: &state, target: &target, cycle: 0, dt: DT, infidelity: inf };
            policy.decide(&ctx, &mut rng).unwrap()
        })
    });
}

fn bench_greedy(c: &mut Criterion) {
    let wf = w();
    let start: QuantumState = PureState::basis(wf.register.clone(), 7).unwrap().into();
    decide_bench(c, "greedy_decide_w", wf, start, 1);
    let af = aklt(4);
    let s = level_zero(&af);
    decide_bench(c, "greedy_decide_aklt4_m20", af, s, 20);
}

fn bench_qsm(c: &mut Criterion) {
    let fam = w();
    let basis = w_basis();
    c.bench_function("qsm_w_build_coarse_plan", |b| {
        b.iter_batched(
            || (),
            |_| {
                let g = build_steering_graph(&fam, &basis, DT).unwrap();
                let cg = coarse_grain(&g);
                plan_route(&cg, 3, cg.target_block).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_cycle, bench_kernel, bench_greedy, bench_qsm);
criterion_main!(benches);
