use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use srdrm::model::{build_generator, GeneratorConfig};
use srdrm::Shape4;
use srdrm_bench::pattern;

// Per-frame generator latency at 2x, 4x and 8x on a fixed input; deeper
// models should be strictly slower.
fn bench_generator(c: &mut Criterion) {
    let mut group = c.benchmark_group("generator_forward");
    group.sample_size(10).measurement_time(Duration::from_secs(5));
    let x = pattern(Shape4::new(1, 3, 30, 40));
    for exp in 1..=3u32 {
        let g = build_generator(&GeneratorConfig::tiny(exp), 0).unwrap();
        group.bench_with_input(BenchmarkId::new("tiny_40x30", 1 << exp), &x, |b, x| {
            b.iter(|| g.forward(black_box(x)).unwrap())
        });
    }
    let full = build_generator(&GeneratorConfig::full(2), 0).unwrap();
    group.bench_with_input(BenchmarkId::new("full_40x30", 4), &x, |b, x| {
        b.iter(|| full.forward(black_box(x)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_generator);
criterion_main!(benches);
