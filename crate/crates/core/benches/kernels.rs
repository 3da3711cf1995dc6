//! Sequential versus parallel execution of the hot paths: the matrix
//! product kernel and a full training step of the default model.

use std::hint::black_box;

use collapse_core::model::{ModelConfig, TinyLM, TokenBatch};
use collapse_core::parallel::Execution;
use collapse_core::tensor::kernels::matmul_nn;
use collapse_core::tensor::Graph;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_nn");
    for &(m, k, n) in &[(2048usize, 64usize, 192usize), (2048, 64, 257)] {
        let a: Vec<f64> = (0..m * k).map(|i| (i % 17) as f64 * 0.1).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i % 13) as f64 * 0.1).collect();
        let mut out = vec![0.0; m * n];
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, format!("{m}x{k}x{n}")), &exec, |bch, &exec| {
                bch.iter(|| matmul_nn(exec, black_box(&a), black_box(&b), &mut out, m, k, n))
            });
        }
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let model = TinyLM::init(ModelConfig::default(), 0).unwrap();
    let ids: Vec<u32> = (0..16 * 128).map(|i| (i * 31 % 256) as u32).collect();
    let batch = TokenBatch::new(ids, 16, 128).unwrap();
    let mut group = c.benchmark_group("forward_backward_16x128");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |bch| {
            bch.iter(|| {
                let mut g = Graph::with_execution(exec);
                let p = model.bind(&mut g);
                let out = model.forward(&mut g, &p, &batch).unwrap();
                let loss = model.lm_loss(&mut g, out.logits, &batch).unwrap();
                g.backward(loss).unwrap();
                black_box(g.scalar(loss))
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, train_step);
criterion_main!(benches);
