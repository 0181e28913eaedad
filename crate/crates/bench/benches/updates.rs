//! Per-update cost of each back-end as the global keyframe count grows.
//!
//! The local partition (IMU, ten clones, two keyframes) and the row count
//! are fixed, so compressed timings should stay flat.

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};

use cmsckf_core::harness::{scaling_fixture, with_backend};
use cmsckf_core::Backend;

const GLOBAL_KEYFRAMES: [usize; 5] = [5, 10, 20, 40, 80];
const ROWS: usize = 40;

fn updates(c: &mut Criterion) {
    let mut group = c.benchmark_group("update");
    group.sample_size(20);
    for n in GLOBAL_KEYFRAMES {
        let (dense, block) = scaling_fixture(n, ROWS, 7).expect("fixture");
        for backend in Backend::ALL {
            let filter = with_backend(&dense, backend);
            group.bench_with_input(BenchmarkId::new(backend.as_str(), n), &n, |b, _| {
                b.iter_batched_ref(
                    || filter.clone(),
                    |f| f.update(&block).expect("update"),
                    BatchSize::LargeInput,
                )
            });
        }
    }
    group.finish();
}

fn recovery(c: &mut Criterion) {
    let mut group = c.benchmark_group("recovery");
    group.sample_size(20);
    for n in GLOBAL_KEYFRAMES {
        let (dense, block) = scaling_fixture(n, ROWS, 7).expect("fixture");
        let mut epoch = with_backend(&dense, Backend::Compressed);
        epoch.update(&block).expect("update");
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter_batched_ref(|| epoch.clone(), |f| f.recover().expect("recover"), BatchSize::LargeInput)
        });
    }
    group.finish();
}

criterion_group!(benches, updates, recovery);
criterion_main!(benches);
