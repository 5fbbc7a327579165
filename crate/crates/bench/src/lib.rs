//! Criterion benchmarks for the hot paths of `cdg-core`.

use std::hint::black_box;

use cdg_core::data::{FeatureMatrix, FeatureOptions};
use cdg_core::net::InitScheme;
use cdg_core::{Activation, AlignedPanel, HeadKind, LagSpec, NetSpec, PrioBuffer, SupportGrid};
use criterion::{BatchSize, BenchmarkId, Criterion, Throughput};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5eed)
}

/// Random-walk prices with `n` bars.
pub fn walk(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut p = 100.0;
    (0..n)
        .map(|_| {
            p *= rng.random_range(-1e-3f64..1e-3).exp();
            p
        })
        .collect()
}

pub fn softmax_row(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn projection(c: &mut Criterion) {
    let mut g = c.benchmark_group("projection");
    let mut rng = rng();
    for n_atoms in [51, 201] {
        let grid = SupportGrid::new(-1.0, 1.0, n_atoms).unwrap();
        let p = softmax_row(&mut rng, n_atoms);
        g.throughput(Throughput::Elements(n_atoms as u64));
        g.bench_with_input(BenchmarkId::new("log_return", n_atoms), &p, |b, p| {
            b.iter(|| grid.project(black_box(p), black_box(0.013), black_box(0.9)))
        });
        g.bench_with_input(BenchmarkId::new("worth", n_atoms), &p, |b, p| {
            b.iter(|| grid.project_worth(black_box(p), 0.013, 1.0, 1.013, 0.9).unwrap())
        });
    }
    g.finish();
}

fn network(c: &mut Criterion) {
    let mut g = c.benchmark_group("mlp");
    g.sample_size(20);
    let mut rng = rng();
    let spec = NetSpec {
        input_dim: 18,
        hidden: vec![256, 256],
        activation: Activation::Relu,
        heads: 4,
        head_kind: HeadKind::Categorical { n_atoms: 51 },
    };
    let params = spec.init(InitScheme::FanIn, &mut rng);
    for batch in [32, 512] {
        let x = Array2::from_shape_fn((batch, spec.input_dim), |_| rng.random_range(-1.0..1.0));
        let up = Array2::from_shape_fn((batch, spec.output_dim()), |_| rng.random_range(-1.0..1.0));
        g.throughput(Throughput::Elements(batch as u64));
        g.bench_with_input(BenchmarkId::new("forward", batch), &x, |b, x| {
            b.iter(|| spec.forward(&params, x.view()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("forward_backward", batch), &x, |b, x| {
            b.iter(|| spec.gradient(&params, x.view(), up.view()).unwrap())
        });
    }
    g.finish();
}

fn replay(c: &mut Criterion) {
    let mut g = c.benchmark_group("replay");
    let mut rng = rng();
    let mut buf = PrioBuffer::new(80_000, 0.75, 0.25, 1e-6).unwrap();
    let ids: Vec<u64> = (0..80_000u64).map(|i| buf.push(i)).collect();
    let losses: Vec<f64> = ids.iter().map(|_| rng.random_range(0.0..2.0)).collect();
    buf.update_priorities(&ids, &losses).unwrap();
    g.throughput(Throughput::Elements(512));
    g.bench_function("sample_512", |b| b.iter(|| buf.sample(512, &mut rng).unwrap()));
    g.bench_function("update_512", |b| {
        b.iter_batched(
            || (0..512).map(|_| rng.random_range(0..80_000u64)).collect::<Vec<_>>(),
            |batch| buf.update_priorities(&batch, &losses[..512]).unwrap(),
            BatchSize::SmallInput,
        )
    });
    g.bench_function("push", |b| b.iter(|| buf.push(black_box(7))));
    g.finish();
}

fn features(c: &mut Criterion) {
    let mut g = c.benchmark_group("features");
    g.sample_size(10);
    let mut rng = rng();
    let n = 20_000;
    let closes: Vec<f64> = (0..4).flat_map(|_| walk(n, &mut rng)).collect();
    // row-major bars x assets
    let closes: Vec<f64> = (0..n).flat_map(|t| (0..4).map(move |a| (a, t))).map(|(a, t)| closes[a * n + t]).collect();
    let assets = (0..4).map(|a| format!("a{a}")).collect();
    let panel = AlignedPanel::new(assets, (0..n as i64).collect(), closes).unwrap();
    let lags = LagSpec::default_for(390);
    g.throughput(Throughput::Elements((n - lags.max_lag()) as u64));
    g.bench_function("build_4x20000", |b| {
        b.iter(|| FeatureMatrix::build(&panel, &lags, FeatureOptions::default()).unwrap())
    });
    g.finish();
}

pub fn benchmarks(c: &mut Criterion) {
    projection(c);
    network(c);
    replay(c);
    features(c);
}
