use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use fuzzy_lsmpc_bench::{example, gains, subsystem_problem};
use fuzzy_lsmpc_core::coordination::CoordinationState;
use fuzzy_lsmpc_core::lmi::{synthesize, SynthesisOptions};
use fuzzy_lsmpc_core::sdp::{solve, SolveOptions};
use fuzzy_lsmpc_core::simulation::{simulate, DisturbanceModel, SimulationSetup};
use std::hint::black_box;

fn solve_bench(c: &mut Criterion) {
    let mut g = c.benchmark_group("solve");
    g.sample_size(10);
    for name in ["coupled_pair", "example1"] {
        let ex = example(name);
        let p = subsystem_problem(&ex, 0);
        g.bench_function(name, |b| b.iter(|| solve(black_box(&p), &SolveOptions::default())));
    }
    g.finish();
}

fn synthesize_bench(c: &mut Criterion) {
    let mut g = c.benchmark_group("synthesize");
    g.sample_size(10);
    for name in ["decoupled_scalar", "coupled_pair", "example1"] {
        let ex = example(name);
        let coord = CoordinationState::new(&ex.system, 1);
        let hist = vec![ex.x0.clone()];
        g.bench_function(name, |b| {
            b.iter(|| synthesize(&ex.system, &ex.hp, &coord, black_box(&hist), &SynthesisOptions::default()))
        });
    }
    g.finish();
}

fn simulate_bench(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulate");
    for name in ["coupled_pair", "example1"] {
        let ex = example(name);
        let k = gains(&ex);
        let mut setup = SimulationSetup::new(&ex.system, 200);
        setup.disturbance = DisturbanceModel::uniform(&ex.system, 7);
        g.bench_function(format!("{name}_200"), |b| {
            b.iter_batched(
                || vec![ex.x0.iter().map(|x| x * 0.01).collect::<Vec<_>>()],
                |h| simulate(&ex.system, &k, &ex.hp, &h, &setup),
                BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, solve_bench, synthesize_bench, simulate_bench);
criterion_main!(benches);
