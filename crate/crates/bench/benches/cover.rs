use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use geobeam::cover::{build_good_cover, classify_looping, CoverOptions, LoopingOptions, SegmentCover};
use geobeam::DiscreteHyperbolicSystem;
use geobeam_bench::{sphere_equator, torus_point};

fn covers(c: &mut Criterion) {
    let mut g = c.benchmark_group("cover");
    g.sample_size(10);
    let h = torus_point();
    g.bench_function("build torus point r=0.02", |b| {
        b.iter(|| build_good_cover(black_box(&h), 0.5, 0.02, &CoverOptions::default()).unwrap())
    });
    let cover = build_good_cover(&h, 0.5, 0.05, &CoverOptions::default()).unwrap();
    g.bench_function("classify torus point r=0.05 [1,10]", |b| {
        b.iter(|| classify_looping(black_box(&cover), 1.0, 10.0, &LoopingOptions::default()).unwrap())
    });
    let eq = sphere_equator();
    let cover = build_good_cover(&eq, 0.5, 0.1, &CoverOptions::default()).unwrap();
    g.bench_function("classify sphere equator r=0.1 [1,7]", |b| {
        b.iter(|| classify_looping(black_box(&cover), 1.0, 7.0, &LoopingOptions::default()).unwrap())
    });
    let cat = DiscreteHyperbolicSystem::new([[2, 1], [1, 1]]).unwrap();
    let seg = SegmentCover::stable(cat, [12345, 67890], 999_983, 4.0, 2f64.powi(-7)).unwrap();
    let cert = seg.certificate(8, 1024);
    g.bench_function("cat-map ladder 2..1024", |b| b.iter(|| seg.ladder(2, 1024, Some(black_box(&cert))).unwrap()));
    g.finish();
}

criterion_group!(benches, covers);
criterion_main!(benches);
