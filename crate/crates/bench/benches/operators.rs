use bgnn_bench::{lattice, random_points};
use bgnn_core::graph::radius_graph;
use bgnn_core::{build_network, fuse_to_bgn, parse_arch, NetworkConfig, MNIST_ARCH, MODELNET_ARCH};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn conv_pool_vs_fused(c: &mut Criterion) {
    let spec = parse_arch("C(8)-MP(1.5,4)").unwrap();
    let fused = fuse_to_bgn(&spec).unwrap();
    let cfg = NetworkConfig {
        label_dim: 1,
        input_radius: 1.5,
        ..NetworkConfig::default()
    };
    let a = build_network(&spec, 1, 0, &cfg).unwrap();
    let b = build_network(&fused, 1, 0, &cfg).unwrap();
    let mut group = c.benchmark_group("coarsening_stage");
    for n in [1_000, 10_000] {
        let (g, x) = lattice(n);
        group.bench_with_input(BenchmarkId::new("conv_pool", n), &n, |bench, _| {
            bench.iter(|| a.predict(&g, &x).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("fused", n), &n, |bench, _| {
            bench.iter(|| b.predict(&g, &x).unwrap())
        });
    }
    group.finish();
}

fn parser(c: &mut Criterion) {
    c.bench_function("parse_mnist_arch", |b| {
        b.iter(|| parse_arch(MNIST_ARCH).unwrap())
    });
    c.bench_function("parse_and_fuse_modelnet_arch", |b| {
        b.iter(|| fuse_to_bgn(&parse_arch(MODELNET_ARCH).unwrap()).unwrap())
    });
}

fn neighbourhoods(c: &mut Criterion) {
    let pts = random_points(5_000, 70.0, 1);
    c.bench_function("radius_graph_5000", |b| {
        b.iter(|| radius_graph(&pts, 2.9).unwrap())
    });
}

criterion_group!(benches, conv_pool_vs_fused, parser, neighbourhoods);
criterion_main!(benches);
