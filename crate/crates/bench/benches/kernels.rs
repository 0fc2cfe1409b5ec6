use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion, Throughput};
use spq_bench::{codebooks, gaussian};
use spq_core::cqc_loss::{batch_loss, loss_backward, CqcConfig, CrossSimMatrix};
use spq_core::index::{adc_all, adc_search, build_index, make_lut};
use spq_core::pq_head::{soft_quantize, soft_quantize_backward};

fn search(c: &mut Criterion) {
    let cb = codebooks(8, 16, 16, 1);
    let query: Vec<f32> = gaussian(1, 128, 2).data().iter().map(|&v| v as f32).collect();
    let mut group = c.benchmark_group("adc");
    for n in [10_000usize, 100_000] {
        let index = build_index(&cb, &gaussian(n, 128, 3)).unwrap();
        let lut = make_lut(&index, &query).unwrap();
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::new("scan", n), &n, |b, _| b.iter(|| adc_all(&index, &lut)));
        group.bench_with_input(BenchmarkId::new("top100", n), &n, |b, _| {
            b.iter(|| adc_search(&index, &query, 100).unwrap())
        });
    }
    group.finish();
    let index = build_index(&cb, &gaussian(16, 128, 3)).unwrap();
    c.bench_function("lut", |b| b.iter(|| make_lut(&index, &query).unwrap()));
}

fn head(c: &mut Criterion) {
    let cb = codebooks(8, 16, 16, 4);
    let x = gaussian(512, 128, 5);
    let g = gaussian(512, 128, 6);
    let mut group = c.benchmark_group("soft_quantize");
    group.throughput(Throughput::Elements(512));
    group.bench_function("forward", |b| b.iter(|| soft_quantize(&cb, &x, 0.2).unwrap()));
    group.bench_function("forward_backward", |b| {
        b.iter_batched(
            || soft_quantize(&cb, &x, 0.2).unwrap().1,
            |tape| soft_quantize_backward(tape, &cb, &x, &g).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

fn loss(c: &mut Criterion) {
    let cfg = CqcConfig::default();
    let anchors = gaussian(512, 128, 7);
    let targets = gaussian(512, 128, 8);
    let mut group = c.benchmark_group("cqc_loss");
    group.bench_function("forward", |b| {
        b.iter(|| batch_loss(&CrossSimMatrix::from_views(&anchors, &targets).unwrap(), &cfg).unwrap())
    });
    group.bench_function("backward", |b| b.iter(|| loss_backward(&anchors, &targets, &cfg).unwrap()));
    group.finish();
}

criterion_group!(benches, search, head, loss);
criterion_main!(benches);
