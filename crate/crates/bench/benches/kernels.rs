use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use icp_attack::attack::AttackConfig;
use icp_attack::gradients::{icp_forward_with_tape, pose_error_gradient, GradientConfig};
use icp_attack::icp::{run_icp_with_model, IcpConfig, MapModel};
use icp_attack::pointcloud::SpatialIndex;
use icp_attack_bench::fixture_pair;

fn kd_tree(c: &mut Criterion) {
    let pair = fixture_pair(1);
    let points = pair.map.points.clone();
    c.bench_function("kdtree/build", |b| {
        b.iter(|| SpatialIndex::new(black_box(&points)))
    });
    let index = SpatialIndex::new(&points);
    c.bench_function("kdtree/nearest_2048", |b| {
        b.iter(|| {
            for q in &pair.scan.points {
                black_box(index.nearest(q));
            }
        })
    });
    c.bench_function("kdtree/k10_2048", |b| {
        b.iter(|| {
            for q in &pair.scan.points {
                black_box(index.k_nearest(q, 10));
            }
        })
    });
}

fn icp(c: &mut Criterion) {
    let pair = fixture_pair(2);
    let map = MapModel::new(&pair.map).expect("map");
    let cfg = IcpConfig::shapenet();
    c.bench_function("icp/shapenet_2048", |b| {
        b.iter(|| run_icp_with_model(black_box(&pair.scan), &map, &cfg).expect("icp"))
    });
}

fn gradient(c: &mut Criterion) {
    let pair = fixture_pair(3);
    let map = MapModel::new(&pair.map).expect("map");
    let cfg = GradientConfig::new(IcpConfig::shapenet());
    let objective = AttackConfig::new(0.1, IcpConfig::shapenet()).objective();
    c.bench_function("gradient/forward_tape", |b| {
        b.iter(|| icp_forward_with_tape(black_box(&pair.scan), &map, &cfg).expect("tape"))
    });
    c.bench_function("gradient/backward", |b| {
        b.iter_batched(
            || {
                icp_forward_with_tape(&pair.scan, &map, &cfg)
                    .expect("tape")
                    .1
            },
            |tape| pose_error_gradient(&tape, &pair.ground_truth, &objective).expect("gradient"),
            BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = kd_tree, icp, gradient
}
criterion_main!(benches);
