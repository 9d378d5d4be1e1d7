use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use stlink_bench::fixtures;
use stlink_core::runner::make_batch;

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    for fx in fixtures() {
        for size in [1, 64] {
            let windows = fx.batch(size);
            let (batch, _) = make_batch(&windows);
            group.bench_with_input(BenchmarkId::new(format!("predict/{}", fx.name), size), &batch, |b, batch| b.iter(|| fx.model.predict(batch).unwrap()));
            let mut trainer = fx.trainer();
            group.bench_with_input(BenchmarkId::new(format!("train_step/{}", fx.name), size), &windows, |b, w| b.iter(|| trainer.step(w).unwrap()));
        }
    }
    group.finish();
}

criterion_group!(benches, forward_backward);
criterion_main!(benches);
