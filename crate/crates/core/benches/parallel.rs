use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use forgetkit::model::{MicroTransformer, ModelConfig};
use forgetkit::tensor::{matmul_nn, Tensor};

fn inputs(n: usize, d: usize) -> Tensor {
    Tensor::new(&[n, d], (0..n * d).map(|i| (i as f64 * 0.31).sin()).collect()).unwrap()
}

/// Runs `f` on the global pool and, when rayon is enabled, on a one-thread
/// pool for comparison.
fn both(c: &mut Criterion, name: &str, size: usize, f: impl Fn() + Sync) {
    let mut group = c.benchmark_group(name);
    group.sample_size(20);
    let label = if forgetkit::is_parallel() {
        "rayon"
    } else {
        "sequential"
    };
    group.bench_function(BenchmarkId::new(label, size), |b| b.iter(&f));
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        group.bench_function(BenchmarkId::new("one-thread", size), |b| b.iter(|| pool.install(&f)));
    }
    group.finish();
}

fn batch_eval(c: &mut Criterion) {
    let model = MicroTransformer::new(ModelConfig::new(32, 20), 0).unwrap();
    let x = inputs(512, 32);
    both(c, "batch_eval", 512, || {
        std::hint::black_box(model.logits(&x).unwrap());
    });
}

fn matmul(c: &mut Criterion) {
    let n = 256;
    let a = inputs(n, n);
    both(c, "matmul", n, || {
        std::hint::black_box(matmul_nn(a.data(), a.data(), n, n, n));
    });
}

criterion_group!(benches, batch_eval, matmul);
criterion_main!(benches);
