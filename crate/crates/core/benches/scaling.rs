use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mamba_home::bench::volume_for;
use mamba_home::home::{HomeLayer, HomeStageConfig};
use mamba_home::network::{Network, NetworkConfig};
use mamba_home::par::with_threads;
use mamba_home::ssm::{scan, ScanDims, ScanMode};
use mamba_home::{ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn threads(c: &mut Criterion) {
    let cfg = NetworkConfig::tiny();
    let mut store = ParamStore::new(0);
    let net = Network::new(&mut store, cfg.clone()).unwrap();
    let mut group = c.benchmark_group("network_forward");
    for n in [1 << 12, 1 << 15] {
        let d = volume_for(n, cfg.divisor()).unwrap();
        let x = Tensor::uniform([1, 1, d[0], d[1], d[2]], 0.0, 1.0, &mut rng());
        let forward = || {
            let tape = Tape::inference();
            net.forward(&tape, &store, tape.constant(x.clone())).unwrap().value()
        };
        group.bench_with_input(BenchmarkId::new("single_thread", n), &n, |b, _| {
            b.iter(|| with_threads(1, forward))
        });
        group.bench_with_input(BenchmarkId::new("all_threads", n), &n, |b, _| {
            b.iter(|| with_threads(0, forward))
        });
    }
    group.finish();
}

fn routing(c: &mut Criterion) {
    let (d, e, s, k) = (32, 4, 4, 256);
    let mut group = c.benchmark_group("home_routing");
    for n in [1 << 11, 1 << 13] {
        let x = Tensor::uniform([1, n, d], -1.0, 1.0, &mut rng());
        let groups = n / k;
        for (name, cfg) in [
            ("grouped", HomeStageConfig::new(1, k, e, 2 * e, s, d)),
            ("global", HomeStageConfig::new(1, n, e, 2 * e, groups * s, d)),
        ] {
            let mut store = ParamStore::new(0);
            let layer = HomeLayer::new(&mut store, "h", cfg);
            group.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| {
                    let tape = Tape::inference();
                    layer.forward(&tape, &store, tape.constant(x.clone()), None).unwrap().value()
                })
            });
        }
    }
    group.finish();
}

fn scan_modes(c: &mut Criterion) {
    let (channels, state) = (16, 4);
    let mut group = c.benchmark_group("selective_scan");
    for n in [1 << 12, 1 << 15] {
        let dims = ScanDims {
            batch: 1,
            len: n,
            channels,
            state,
        };
        let len = channels * n * state;
        let decay = Tensor::uniform([len], 0.5, 0.99, &mut rng()).into_data();
        let drive = Tensor::uniform([len], -1.0, 1.0, &mut rng()).into_data();
        let readout = Tensor::uniform([n * state], -1.0, 1.0, &mut rng()).into_data();
        for (name, mode) in [("sequential", ScanMode::Sequential), ("chunked", ScanMode::default())] {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| scan(&decay, &drive, &readout, dims, mode))
            });
        }
    }
    group.finish();
}

criterion_group! {
    name = scaling;
    config = Criterion::default().sample_size(10).measurement_time(Duration::from_secs(3));
    targets = threads, routing, scan_modes
}
criterion_main!(scaling);
