use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kmeta_bench::{default_model, random_matrix};
use kmeta_core::linalg;
use kmeta_core::model::Mode;
use kmeta_core::Graph;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let a = random_matrix(n, n, 1);
        let b = random_matrix(n, n, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| a.matmul(&b).unwrap())
        });
    }
    group.finish();
}

fn pinv(c: &mut Criterion) {
    let mut group = c.benchmark_group("pinv");
    // Embedding snapshot matrices are D × (T - 1).
    for (d, t) in [(2, 19), (4, 39), (10, 99)] {
        let a = random_matrix(d, t, 3);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{d}x{t}")), &a, |bench, a| {
            bench.iter(|| linalg::pinv(a).unwrap())
        });
    }
    group.finish();
}

fn episode(c: &mut Criterion) {
    let mut group = c.benchmark_group("episode");
    let support = random_matrix(20, 10, 4);
    let query = random_matrix(20, 10, 5);
    for (name, repr) in [("ours", true), ("ours-n", false)] {
        let params = default_model(10, repr);
        group.bench_function(BenchmarkId::new("forward", name), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                params.episode_loss(&mut g, &support, &query, &mut Mode::Eval).unwrap()
            })
        });
        group.bench_function(BenchmarkId::new("forward_backward", name), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let loss = params.episode_loss(&mut g, &support, &query, &mut Mode::Eval).unwrap();
                g.param_grads(&g.backward(loss).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, pinv, episode);
criterion_main!(benches);
