use std::hint::black_box;

use apmc::channel::{coefficients_from_cdf, AnalyticChannel};
use apmc::geometry::{ApertureSpec, Topology, TopologySpec};
use apmc::link::{evaluate_ber, LinkConfig};
use apmc::par::Parallelism;
use apmc::walker::{simulate_channel, Kernel, SimProtocol};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("rayon", Parallelism::Rayon)];

fn walk(c: &mut Criterion) {
    let topo = Topology::new(TopologySpec::free_space_default().with_plane(ApertureSpec::concentric(3.0, 2.4))).unwrap();
    let mut group = c.benchmark_group("walk");
    group.sample_size(10);
    for kernel in [Kernel::Stepwise, Kernel::Leaping] {
        let proto = SimProtocol {
            n_particles: 512,
            dt: 1e-3,
            t_total: 2.0,
            kernel,
            ..SimProtocol::default()
        };
        for (name, par) in MODES {
            group.bench_with_input(BenchmarkId::new(format!("{kernel:?}"), name), &par, |b, &par| {
                b.iter(|| simulate_channel(black_box(&topo), &proto, par).unwrap())
            });
        }
    }
    group.finish();
}

fn ber(c: &mut Criterion) {
    let topo = Topology::new(TopologySpec::free_space_default()).unwrap();
    let resp = coefficients_from_cdf(&AnalyticChannel::new(&topo).unwrap(), 0.2, None).unwrap();
    let cfg = LinkConfig {
        n_bits: 100_000,
        ..LinkConfig::new(1500, 0.2)
    };
    let mut group = c.benchmark_group("ber");
    group.sample_size(10);
    for (name, par) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            b.iter(|| evaluate_ber(&cfg, black_box(&resp), 335, par))
        });
    }
    group.finish();
}

criterion_group!(benches, walk, ber);
criterion_main!(benches);
