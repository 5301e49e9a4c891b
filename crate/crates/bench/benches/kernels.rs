use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use homlab::corrector::{chi_all, FkConfig};
use homlab::effective::factorize_block;
use homlab::potential::Lattice;
use homlab::torus::{gibbs_sample, GibbsConfig};
use homlab::{BoxGeometry, Preset, Stream, TorusState};
use nalgebra::DMatrix;

fn lattice(preset: Preset, half_width: usize) -> Lattice {
    let spec = preset.spec();
    Lattice::new(&spec, BoxGeometry::new(spec.dimension(), half_width)).unwrap()
}

fn drift(c: &mut Criterion) {
    let mut group = c.benchmark_group("drift_all");
    for hw in [2, 8, 32] {
        let lat = lattice(Preset::NearestNeighbor, hw);
        let x = TorusState::uniform(lat.n_sites(), &mut Stream::root(1).rng());
        let mut out = vec![0.0; lat.n_sites()];
        group.bench_with_input(BenchmarkId::from_parameter(lat.n_sites()), &x, |b, x| {
            b.iter(|| lat.drift_all(black_box(x.angles()), &mut out))
        });
    }
    group.finish();
}

fn mala_sweeps(c: &mut Criterion) {
    let lat = lattice(Preset::NearestNeighbor, 4);
    let cfg = GibbsConfig {
        chains: 1,
        burn_in: 0,
        thin: 1,
        samples_per_chain: 100,
        ..GibbsConfig::default()
    };
    c.bench_function("mala_100_sweeps_9_sites", |b| {
        b.iter(|| gibbs_sample(&lat, black_box(&cfg), Stream::root(2)).unwrap())
    });
}

fn feynman_kac(c: &mut Criterion) {
    let lat = lattice(Preset::NearestNeighbor, 2);
    let y = TorusState::uniform(lat.n_sites(), &mut Stream::root(3).rng());
    let cfg = FkConfig {
        horizon: 2.0,
        dt: 0.02,
        pairs: 50,
        h: 1e-2,
    };
    c.bench_function("chi_all_50_pairs", |b| {
        b.iter(|| chi_all(&lat, black_box(&y), &cfg, Stream::root(4)).unwrap())
    });
}

fn pivoted_cholesky(c: &mut Criterion) {
    let mut group = c.benchmark_group("factorize_block");
    for n in [3, 9, 25] {
        // Rank-deficient Gram matrix, the hard case for the pivoting.
        let g = DMatrix::from_fn(n, n.div_ceil(2), |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let a = &g * g.transpose();
        group.bench_with_input(BenchmarkId::from_parameter(n), &a, |b, a| {
            b.iter(|| factorize_block(black_box(a), 1e-10).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, drift, mala_sweeps, feynman_kac, pivoted_cholesky);
criterion_main!(benches);
