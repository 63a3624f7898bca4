use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sinkformers::attention::{attention_forward, dot_cost};
use sinkformers::autodiff::Graph;
use sinkformers::sinkhorn::{self, softmax};
use sinkformers::{AttentionParams, CostMatrix, NormalizationSpec, ParticleCloud, SeededRng, StopRule};

fn params(rng: &mut SeededRng, d: usize) -> AttentionParams {
    AttentionParams::new(rng.normal_matrix(d, d, 0.3), rng.normal_matrix(d, d, 0.3), rng.normal_matrix(d, d, 0.3)).unwrap()
}

fn normalization(c: &mut Criterion) {
    let mut group = c.benchmark_group("normalization");
    for n in [16, 64, 256] {
        let cost = CostMatrix::new(SeededRng::new(0).normal_matrix(n, n, 1.0)).unwrap();
        group.bench_with_input(BenchmarkId::new("softmax", n), &cost, |b, cost| b.iter(|| softmax(black_box(cost))));
        group.bench_with_input(BenchmarkId::new("sinkhorn_k3", n), &cost, |b, cost| {
            b.iter(|| sinkhorn::sinkhorn(black_box(cost), StopRule::Iterations(3)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sinkhorn_converged", n), &cost, |b, cost| {
            b.iter(|| sinkhorn::sinkhorn(black_box(cost), StopRule::tolerance(1e-9)).unwrap())
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention_forward");
    let mut rng = SeededRng::new(1);
    let p = params(&mut rng, 8);
    let x = ParticleCloud::new(rng.normal_matrix(128, 8, 1.0)).unwrap();
    for (name, norm) in [("softmax", NormalizationSpec::Softmax), ("sinkhorn_k3", NormalizationSpec::sinkhorn(3).unwrap())] {
        group.bench_function(name, |b| b.iter(|| attention_forward(black_box(&x), &p, norm).unwrap()));
    }
    group.bench_function("dot_cost", |b| b.iter(|| dot_cost(black_box(&p), &x).unwrap()));
    group.finish();
}

fn backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("autodiff");
    let (n, d) = (32, 4);
    for k in [1, 3, 9] {
        let mut g = Graph::new();
        let x = g.input("X", n, d).unwrap();
        let wq = g.param("W_Q", d, d).unwrap();
        let wk = g.param("W_K", d, d).unwrap();
        let q = g.matmul_t(x, wq).unwrap();
        let kk = g.matmul_t(x, wk).unwrap();
        let cost = g.matmul_t(q, kk).unwrap();
        let logk = g.sinkhorn_log(cost, k).unwrap();
        let kern = g.exp(logk);
        let out = g.matmul(kern, x).unwrap();
        g.sum_all(out);
        let mut rng = SeededRng::new(2);
        let bindings: BTreeMap<String, _> = [
            ("X".to_string(), rng.normal_matrix(n, d, 1.0)),
            ("W_Q".to_string(), rng.normal_matrix(d, d, 0.3)),
            ("W_K".to_string(), rng.normal_matrix(d, d, 0.3)),
        ]
        .into_iter()
        .collect();
        group.bench_function(BenchmarkId::new("value_and_grad", k), |b| b.iter(|| g.value_and_grad(black_box(&bindings)).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, normalization, attention, backward);
criterion_main!(benches);
