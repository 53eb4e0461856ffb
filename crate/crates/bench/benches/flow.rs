use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use geobeam::flow::{conjugate_points, propagate_linearization};
use geobeam::ManifoldModel;
use geobeam_bench::sphere_start;

fn linearization(c: &mut Criterion) {
    let (m, rho) = sphere_start();
    c.bench_function("propagate_linearization S² T=7", |b| {
        b.iter(|| propagate_linearization(black_box(&m), black_box(&rho), 7.0, &Default::default()).unwrap())
    });
    let seg = propagate_linearization(&m, &rho, 7.0, &Default::default()).unwrap();
    c.bench_function("conjugate_points S² [0,7]", |b| b.iter(|| conjugate_points(black_box(&seg), (0.0, 7.0), 1e-7).unwrap()));
    let s3 = ManifoldModel::sphere(3);
    let rho3 = geobeam::PhasePoint::from_direction(&s3, &[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]).unwrap();
    c.bench_function("propagate_linearization S³ T=4", |b| {
        b.iter(|| propagate_linearization(black_box(&s3), black_box(&rho3), 4.0, &Default::default()).unwrap())
    });
}

criterion_group!(benches, linearization);
criterion_main!(benches);
