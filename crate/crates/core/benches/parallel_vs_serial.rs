//! Data-parallel hot paths, benchmarked against a sequential baseline.
//!
//! Build with the default `parallel` feature to measure the rayon paths;
//! each group then also runs the same workload inside a one-thread pool as
//! the in-process sequential reference. Rebuild with
//! `cargo bench --no-default-features` to measure the compiled sequential
//! fallback itself — group names match, so reports line up.

use criterion::{criterion_group, criterion_main, Criterion};
use robliq_core::control::{simulate, SimOptions};
use robliq_core::grid::{SpaceBox, SpaceTimeGrid};
use robliq_core::model::{validate_assumptions, FactorModel};
use robliq_core::params::RobustParams;
use robliq_core::pde::{solve_singular, SolverOptions, ValueSolution};
use std::hint::black_box;

fn model() -> FactorModel {
    FactorModel::ou_liquidity(0.0, 1.0, 0.5, 0.3).unwrap()
}

fn params() -> RobustParams {
    RobustParams::new(2.0, 4.0, 1.0, 0.1).unwrap()
}

fn sbox() -> SpaceBox {
    SpaceBox::new([-4.0, -4.0], [4.0, 4.0])
}

fn solved() -> ValueSolution {
    let grid = SpaceTimeGrid::new(1.0, 1e-4, 128, &sbox(), &[48, 36]).unwrap();
    solve_singular(
        &model(),
        &params(),
        &grid,
        &SolverOptions { estimate_error: false, ..Default::default() },
    )
    .unwrap()
}

/// Run `f` on a single-thread pool (sequential reference) when the parallel
/// backend is compiled in; otherwise the build itself is sequential and the
/// reference variant is skipped.
#[cfg(feature = "parallel")]
fn on_one_thread<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(f)
}

fn bench_assumption_sampling(c: &mut Criterion) {
    let m = model();
    let p = params();
    let b = sbox();
    let mut group = c.benchmark_group("assumption_sampling_8k");
    group.bench_function("shim", |bencher| {
        bencher.iter(|| black_box(validate_assumptions(&m, &p, &b, 8192).unwrap()))
    });
    #[cfg(feature = "parallel")]
    group.bench_function("one_thread", |bencher| {
        bencher.iter(|| on_one_thread(|| black_box(validate_assumptions(&m, &p, &b, 8192).unwrap())))
    });
    group.finish();
}

fn bench_splitting_solver(c: &mut Criterion) {
    let m = model();
    let p = params();
    let grid = SpaceTimeGrid::new(1.0, 1e-4, 96, &sbox(), &[64, 48]).unwrap();
    let opts = SolverOptions { estimate_error: false, ..Default::default() };
    let mut group = c.benchmark_group("splitting_solve_96x64x48");
    group.sample_size(10);
    group.bench_function("shim", |bencher| {
        bencher.iter(|| black_box(solve_singular(&m, &p, &grid, &opts).unwrap()))
    });
    #[cfg(feature = "parallel")]
    group.bench_function("one_thread", |bencher| {
        bencher.iter(|| on_one_thread(|| black_box(solve_singular(&m, &p, &grid, &opts).unwrap())))
    });
    group.finish();
}

fn bench_path_simulation(c: &mut Criterion) {
    let m = model();
    let p = params();
    let sol = solved();
    let mut opts = SimOptions::new(0.0, [0.0, 0.0], 1.0, 2000, 200, 9);
    opts.h_end = 1e-4;
    let mut group = c.benchmark_group("simulate_2k_paths");
    group.sample_size(10);
    group.bench_function("shim", |bencher| {
        bencher.iter(|| black_box(simulate(&m, &p, &sol, &opts).unwrap()))
    });
    #[cfg(feature = "parallel")]
    group.bench_function("one_thread", |bencher| {
        bencher.iter(|| on_one_thread(|| black_box(simulate(&m, &p, &sol, &opts).unwrap())))
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_assumption_sampling,
    bench_splitting_solver,
    bench_path_simulation
);
criterion_main!(benches);
