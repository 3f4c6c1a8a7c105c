use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pfl_bench::mx2_instance;
use pfl_core::optimizers::{Algorithm, Optimizer, OptimizerConfig};
use pfl_core::{eval_loss, grad_full, Block, PartitionedModel};

fn gradients(c: &mut Criterion) {
    let (spec, _) = mx2_instance(20, 1000, 15, 0.3, 1);
    let x = PartitionedModel::zeros(&spec.shape().unwrap());
    let mut group = c.benchmark_group("oracle");
    group.bench_function("loss", |b| b.iter(|| eval_loss(&spec, &x).unwrap()));
    group.bench_function("grad_w", |b| b.iter(|| grad_full(&spec, &x, Block::W).unwrap()));
    group.bench_function("grad_beta", |b| b.iter(|| grad_full(&spec, &x, Block::Beta).unwrap()));
    group.finish();
}

fn steps(c: &mut Criterion) {
    let (spec, profile) = mx2_instance(10, 100, 15, 1.0, 2);
    let init = PartitionedModel::zeros(&spec.shape().unwrap());
    let mut group = c.benchmark_group("step");
    for algorithm in [Algorithm::Lsgd, Algorithm::Acd, Algorithm::Ascd, Algorithm::Scd, Algorithm::Svrcd, Algorithm::Asvrcd] {
        let mut config = OptimizerConfig::new(algorithm);
        if algorithm == Algorithm::Lsgd {
            config.eta = Some(0.01);
            config.tau = Some(5);
        }
        let params = config.resolve(&profile, spec.n()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(algorithm.label()), &params, |b, params| {
            let mut opt = Optimizer::new(&spec, *params, &init, 7, 0, false).unwrap();
            b.iter(|| opt.step().unwrap());
        });
    }
    group.finish();
}

criterion_group!(benches, gradients, steps);
criterion_main!(benches);
