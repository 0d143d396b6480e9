use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use sbs_core::autodiff::Graph;
use sbs_core::costmodel::{gated_cost, resnet18_layers};
use sbs_core::decomposition::decompose;
use sbs_core::gates::GateState;
use sbs_core::model::SearchOptions;
use sbs_core::{
    discrete_cost, gaussian_blobs, BitLadder, BlobsConfig, CompressionConfig, CostOptions,
    GateThresholds, Mlp, Mode, ModelConfig, Tensor,
};

/// Evenly spread codes in `[0, 1)` without a generator.
fn codes(n: usize) -> Tensor {
    Tensor::vector(
        (0..n)
            .map(|i| (i as f64 * 0.618_033_988_75).fract())
            .collect(),
    )
}

fn bench_decompose(c: &mut Criterion) {
    let ladder = BitLadder::default();
    let mut group = c.benchmark_group("decompose");
    for n in [1_000, 100_000] {
        let z = codes(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &z, |b, z| {
            b.iter(|| decompose(black_box(z), &ladder))
        });
    }
    group.finish();
}

fn bench_gated_forward(c: &mut Criterion) {
    let data = gaussian_blobs(
        &BlobsConfig {
            samples: 128,
            dim: 32,
            classes: 10,
            spread: 0.5,
        },
        0,
    )
    .unwrap();
    let cfg = ModelConfig {
        hidden: vec![64, 64],
        ..ModelConfig::default()
    };
    let mut model = Mlp::seeded(32, 10, &cfg, false, 0).unwrap();
    model.calibrate(&data).unwrap();
    let ladder = BitLadder::default();
    let thresholds = vec![GateThresholds::zeros(&ladder); model.layers.len()];
    let mode = Mode::Search {
        ladder: &ladder,
        group_size: 4,
        thresholds: &thresholds,
        options: SearchOptions {
            learn_prune: true,
            learn_w: true,
            learn_x: true,
            frozen_groups: None,
        },
    };
    c.bench_function("gated_forward_backward/128x32-64-64-10", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let f = model
                .forward(&mut g, black_box(&data.features), mode)
                .unwrap();
            let loss = g.softmax_cross_entropy(f.logits, &data.labels).unwrap();
            g.backward(loss).unwrap()
        })
    });
}

fn bench_cost(c: &mut Criterion) {
    let specs = resnet18_layers();
    let ladder = BitLadder::default();
    let states: Vec<GateState> = specs
        .iter()
        .map(|s| GateState::all_open(s.groups(16), &ladder))
        .collect();
    c.bench_function("gated_cost/resnet18", |b| {
        b.iter(|| gated_cost(black_box(&specs), &states, &ladder, 16).unwrap())
    });
    let config = CompressionConfig::uniform(&specs, 4, 16);
    c.bench_function("discrete_cost/resnet18", |b| {
        b.iter(|| discrete_cost(black_box(&specs), &config, 16, CostOptions::default()).unwrap())
    });
}

criterion_group!(benches, bench_decompose, bench_gated_forward, bench_cost);
criterion_main!(benches);
