use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use esoseg_core::inference::largest_component;
use esoseg_core::losses::signed_distance_map;
use esoseg_core::metrics::evaluate_scan;
use esoseg_core::BinaryMask;

fn shifted(mask: &BinaryMask, dx: usize) -> BinaryMask {
    let mut out = BinaryMask::empty(*mask.geometry());
    let src = mask.voxels().to_vec();
    for (i, v) in out.voxels_mut().iter_mut().enumerate().skip(dx) {
        *v = src[i - dx];
    }
    out
}

fn metrics(c: &mut Criterion) {
    let case = esoseg_bench::phantom(1);
    let pred = shifted(&case.gtv, 2);
    c.bench_function("evaluate_scan 96x96x48", |b| {
        b.iter(|| evaluate_scan(black_box(&pred), black_box(&case.gtv)).unwrap())
    });
    c.bench_function("signed_distance_map 96x96x48", |b| {
        b.iter(|| signed_distance_map(black_box(&case.gtv)).unwrap())
    });
    c.bench_function("largest_component 96x96x48", |b| {
        b.iter(|| largest_component(black_box(&pred)))
    });
}

criterion_group!(benches, metrics);
criterion_main!(benches);
