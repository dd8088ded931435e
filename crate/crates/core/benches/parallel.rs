use cachegram::analysis::{evaluate_with, Knn};
use cachegram::par::Execution;
use cachegram::sim::{build_benchmark_with, SimParams};
use cachegram::v8::recovery_trials;
use cachegram::{ArchProfile, Technique};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn params() -> SimParams {
    SimParams { duration_ms: 5_000, ..SimParams::for_arch(ArchProfile::intel()) }
}

fn simulate(c: &mut Criterion) {
    let mut g = c.benchmark_group("build_benchmark");
    g.sample_size(10);
    let p = params();
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| build_benchmark_with(exec, 10, 20, Technique::Occupancy, &p, 1).unwrap())
        });
    }
    g.finish();
}

fn classify(c: &mut Criterion) {
    let mut g = c.benchmark_group("evaluate");
    g.sample_size(10);
    let ds = build_benchmark_with(Execution::default(), 10, 20, Technique::Occupancy, &params(), 1).unwrap();
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_with(exec, &ds, 512, &Knn::default()).unwrap())
        });
    }
    g.finish();
}

fn offsets(c: &mut Criterion) {
    let mut g = c.benchmark_group("v8_recovery");
    g.sample_size(10);
    let offs: Vec<u64> = (0..64).map(|i| i * 61 % 4096).collect();
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| recovery_trials(exec, &offs, 1 << 16, 0.05, 1))
        });
    }
    g.finish();
}

criterion_group!(benches, simulate, classify, offsets);
criterion_main!(benches);
