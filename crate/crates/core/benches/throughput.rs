//! Throughput comparison of the sequential and data-parallel Monte Carlo
//! drivers, plus the two hot single-threaded kernels (chain stepping and
//! exact-kernel assembly). Built with the default `parallel` feature the
//! multi-thread cases exercise the work-stealing path; without it they fall
//! back to the sequential driver and the comparison collapses, which is
//! exactly the regression the benchmark is meant to expose.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use rightmost::anchored::{InitialCondition, ZetaChain};
use rightmost::lattice::SimParams;
use rightmost::qsd::{build_kernel, yaglom, TruncatedStateSpace, TruncationMode};
use rightmost::renewal::survival_curve;

fn bench_survival_driver(c: &mut Criterion) {
    let params = SimParams::new(0.45, 32, 64, 17).unwrap();
    let trials = 4_000u64;
    let mut group = c.benchmark_group("survival_driver");
    for threads in [1usize, 0] {
        let label = if threads == 1 { "sequential" } else { "parallel" };
        group.bench_with_input(BenchmarkId::new(label, trials), &threads, |b, &threads| {
            b.iter(|| {
                let curve =
                    survival_curve(&params, &InitialCondition::Origin, trials, threads).unwrap();
                black_box(curve.survivors_past(32))
            })
        });
    }
    group.finish();
}

fn bench_chain_stepping(c: &mut Criterion) {
    let params = SimParams::new(0.55, 256, 128, 3).unwrap();
    c.bench_function("zeta_chain_256_levels", |b| {
        let mut trial = 0u64;
        b.iter(|| {
            trial += 1;
            let mut chain = ZetaChain::new(&params, trial, &InitialCondition::Full).unwrap();
            chain.advance_to(256).unwrap();
            black_box(chain.config().count())
        })
    });
}

fn bench_exact_oracle(c: &mut Criterion) {
    let space = TruncatedStateSpace::new(10).unwrap();
    c.bench_function("kernel_build_w10", |b| {
        b.iter(|| black_box(build_kernel(0.4, &space, TruncationMode::Project).unwrap()))
    });
    let kernel = build_kernel(0.4, &space, TruncationMode::Project).unwrap();
    c.bench_function("yaglom_w10", |b| {
        b.iter(|| black_box(yaglom(&kernel, 1e-12, 100_000).unwrap().lambda))
    });
}

criterion_group!(benches, bench_survival_driver, bench_chain_stepping, bench_exact_oracle);
criterion_main!(benches);
