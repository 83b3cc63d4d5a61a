use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mfdrbsde::drbsde::random_frozen_data;
use mfdrbsde::fixedpoint::{empirical_contraction, NormChoice};
use mfdrbsde::model::{Lipschitz, ProblemSpec};
use mfdrbsde::oracle::dynkin_value_bruteforce;
use mfdrbsde::penalization::{cascade, Schedule};
use mfdrbsde::{par, Lattice};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec() -> ProblemSpec {
    ProblemSpec::new(
        "0.3 * ybar + 2 * b / (1 + abs(b))",
        "-1 + 0.05 * min(y, 5)",
        "1 + 0.05 * max(y, -5)",
        "b / (1 + abs(b))",
        Lipschitz {
            cf: 0.3,
            gamma1: 0.05,
            beta1: 0.05,
            ..Default::default()
        },
        2.0,
    )
    .unwrap()
}

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn oracle(c: &mut Criterion) {
    let lat = Lattice::new(1.0, 4).unwrap();
    let fd = random_frozen_data(&lat, &mut ChaCha8Rng::seed_from_u64(1));
    let mut group = c.benchmark_group("oracle_n4");
    for (name, seq) in MODES {
        par::set_sequential(seq);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| dynkin_value_bruteforce(&fd, &lat).unwrap())
        });
    }
    par::set_sequential(false);
    group.finish();
}

fn contraction_trials(c: &mut Criterion) {
    let lat = Lattice::new(1.0, 100).unwrap();
    let spec = spec();
    let mut group = c.benchmark_group("empirical_contraction_100_trials");
    group.sample_size(10);
    for (name, seq) in MODES {
        par::set_sequential(seq);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| empirical_contraction(&spec, &lat, 0.5, 100, 3, NormChoice::D).unwrap())
        });
    }
    par::set_sequential(false);
    group.finish();
}

fn penalized_cascade(c: &mut Criterion) {
    let spec = spec();
    let mut group = c.benchmark_group("cascade_n200_m16");
    group.sample_size(10);
    let lat = Lattice::new(1.0, 200).unwrap();
    for (name, seq) in MODES {
        par::set_sequential(seq);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| cascade(&spec, &lat, &Schedule::doubling(16, 16), 1e-6).unwrap())
        });
    }
    par::set_sequential(false);
    group.finish();
}

criterion_group!(benches, oracle, contraction_trials, penalized_cascade);
criterion_main!(benches);
