//! Rasterizer throughput on one thread vs the full rayon pool.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::ThreadPoolBuilder;

use splatseg_core::raster::{render, RasterConfig};
use splatseg_core::selftest::{origin_camera, random_field};

fn bench_render(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cam = origin_camera();
    let cfg = RasterConfig::default();
    let mut group = c.benchmark_group("render");
    for n in [256usize, 4096] {
        let field = random_field(&mut rng, n, 8);
        for threads in [1usize, 0] {
            let pool = ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let label = if threads == 1 { "sequential" } else { "parallel" };
            group.bench_with_input(BenchmarkId::new(label, n), &field, |b, f| {
                b.iter(|| pool.install(|| render(f, &cam, (128, 128), &cfg).unwrap()))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_render);
criterion_main!(benches);
