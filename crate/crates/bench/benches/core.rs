use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use fedcvar_bench::{federation, mlp_fixture};
use fedcvar_core::fed::Execution;
use fedcvar_core::numerics::loss_and_grad;
use fedcvar_core::risk::{cvar_discrete, cvar_grid_oracle};

fn gradients(c: &mut Criterion) {
    let (params, batch) = mlp_fixture(784, vec![64, 64], 10, 64);
    c.bench_function("loss_and_grad mlp 784-64-64-10, batch 64", |b| {
        b.iter(|| loss_and_grad(black_box(&params), black_box(&batch)).unwrap())
    });
    let (params, batch) = mlp_fixture(2, vec![], 3, 32);
    c.bench_function("loss_and_grad logreg 2-3, batch 32", |b| {
        b.iter(|| loss_and_grad(black_box(&params), black_box(&batch)).unwrap())
    });
}

fn cvar(c: &mut Criterion) {
    let values: Vec<f64> = (0..30).map(|i| ((i * 7919) % 31) as f64 / 3.0).collect();
    let probs = vec![1.0 / 30.0; 30];
    c.bench_function("cvar_discrete n=30", |b| b.iter(|| cvar_discrete(black_box(&values), &probs, 0.3).unwrap()));
    c.bench_function("cvar_grid_oracle n=30 step 1e-6", |b| {
        b.iter(|| cvar_grid_oracle(black_box(&values), &probs, 0.3, 0.0, 10.0, 1e-6))
    });
}

fn rounds(c: &mut Criterion) {
    for (name, exec) in [("eager", Execution::Eager), ("on_demand", Execution::OnDemand)] {
        c.bench_function(&format!("synthetic round, {name}"), |b| {
            b.iter_batched(|| federation(exec, 1), |mut fed| fed.run_round().map(|r| r.selected_user).unwrap(), BatchSize::SmallInput)
        });
    }
}

criterion_group!(benches, gradients, cvar, rounds);
criterion_main!(benches);
