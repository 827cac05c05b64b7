use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use weakpoint_bench::{random_cloud, random_points, random_values};
use weakpoint_core::cloudstore::{radius_neighbors, DEFAULT_NEIGHBOR_CAP};
use weakpoint_core::crf::{crf_refine, CrfConfig};
use weakpoint_core::kpnet::{kernel_correlation, GeometryConfig, KpConvLayer};
use weakpoint_core::mprm::{spatial_attention_forward, AttentionState, PathId, ScoreMap};
use weakpoint_core::numerics::{ParamStore, Tape};
use weakpoint_core::weaksup::WeakLabel;

fn neighbors(c: &mut Criterion) {
    let mut g = c.benchmark_group("radius_neighbors");
    for n in [1_000, 10_000] {
        let pts = random_points(n, 4.0, 1);
        g.bench_with_input(BenchmarkId::from_parameter(n), &pts, |b, pts| {
            b.iter(|| radius_neighbors(black_box(pts), pts, 0.2, Some(DEFAULT_NEIGHBOR_CAP)).unwrap())
        });
    }
    g.finish();
}

fn kpconv(c: &mut Criterion) {
    let geometry = GeometryConfig::default();
    let disp = geometry.disposition().unwrap();
    let pts = random_points(2_000, 1.0, 2);
    let r = geometry.radius(0);
    let nb = radius_neighbors(&pts, &pts, r, Some(geometry.neighbor_cap)).unwrap();
    let corr = Arc::new(kernel_correlation(&pts, &pts, &nb, &disp, r).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let (cin, cout) = (32, 32);
    let layer = KpConvLayer::new(&mut store, "bench", geometry.kernel_points, cin, cout, &mut rng);
    let x = random_values(pts.len() * cin, 4);
    c.bench_function("kpconv_forward_backward_2000x32", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(vec![pts.len(), cin], x.clone(), true).unwrap();
            let y = layer.forward(&mut tape, &store, xv, &corr).unwrap();
            let s = tape.sum_all(y);
            tape.backward(s).unwrap();
            black_box(tape.grad(xv).map(|g| g[0]))
        })
    });
}

fn attention(c: &mut Criterion) {
    let (n, ch) = (128, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let state = AttentionState::new(&mut store, "bench", ch, ch / 4, true, &mut rng);
    let a = random_values(n * ch, 6);
    c.bench_function("spatial_attention_forward_backward_128x64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let av = tape.leaf(vec![n, ch], a.clone(), true).unwrap();
            let y = spatial_attention_forward(&mut tape, &store, av, &state).unwrap();
            let s = tape.sum_all(y);
            tape.backward(s).unwrap();
            black_box(tape.grad(av).map(|g| g[0]))
        })
    });
}

fn crf(c: &mut Criterion) {
    let classes = 6;
    let cloud = random_cloud(1_000, 3.0, classes as i32, 7);
    let label = WeakLabel::all(classes);
    let map = ScoreMap::masked(cloud.len(), random_values(cloud.len() * classes, 8), &label, PathId::Fused, 0).unwrap();
    let config = CrfConfig::default();
    c.bench_function("crf_mean_field_1000x6", |b| b.iter(|| crf_refine(black_box(&cloud), &map, &config).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = neighbors, kpconv, attention, crf
}
criterion_main!(benches);
