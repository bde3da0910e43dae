use criterion::{black_box, criterion_group, criterion_main, Criterion};
use nf_core::gvo::{build_patch, sample_test_vectors, sample_train_vectors, AnglePredictor, GvoConfig, GvoNetwork};
use nf_core::ngl::{ngl_loss_gradients, NglConfig, QuerySampler};
use nf_core::nn::{init_geometric, Mlp};
use nf_core::pointcloud::{synth_shape, ShapeKind};
use nf_core::SpatialIndex;

fn knn(c: &mut Criterion) {
    let cloud = synth_shape(ShapeKind::Torus, 20_000, 1).unwrap();
    let index = SpatialIndex::build(cloud.points());
    let queries = &cloud.points()[..256];
    c.bench_function("knn k=64 x256", |b| {
        b.iter(|| {
            for q in queries {
                black_box(index.knn(q, 64));
            }
        })
    });
    c.bench_function("kd-tree build 20k", |b| {
        b.iter(|| SpatialIndex::build(black_box(cloud.points())))
    });
}

fn field_gradients(c: &mut Criterion) {
    let cloud = synth_shape(ShapeKind::Sphere, 5000, 2).unwrap();
    let index = SpatialIndex::build(cloud.points());
    let cfg = NglConfig::desk();
    let net = init_geometric(&Mlp::field(cfg.width), 0.5, 3);
    let queries = QuerySampler::new(&cloud, &index, cfg.sigma_rank, cfg.sigma_floor, 4).sample(cfg.batch);
    c.bench_function("field loss gradient, desk batch", |b| {
        b.iter(|| ngl_loss_gradients(&net, black_box(&queries), &index, &cloud, &cfg).unwrap())
    });
}

fn patch_network(c: &mut Criterion) {
    let cloud = synth_shape(ShapeKind::Cube, 5000, 5).unwrap();
    let index = SpatialIndex::build(cloud.points());
    let cfg = GvoConfig::desk();
    let net = GvoNetwork::new(&cfg, 6).unwrap();
    let patch = build_patch(&cloud, &index, 0, cfg.m).unwrap();
    let normal = cloud.gt_normals().unwrap()[0];
    let train = sample_train_vectors(cfg.train_vectors, 7).candidates;
    let test = sample_test_vectors(&normal, cfg.test_vectors, cfg.eta, 8).candidates;
    c.bench_function("patch network training step, one patch", |b| {
        b.iter(|| net.losses_with_gradient(black_box(&patch), &train, &normal, cfg.lambda))
    });
    c.bench_function("patch network candidate scoring", |b| {
        b.iter(|| net.predict_angles(black_box(&patch), &test).unwrap())
    });
}

criterion_group!(benches, knn, field_gradients, patch_network);
criterion_main!(benches);
