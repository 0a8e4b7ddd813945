//! Sequential vs. rayon execution of the data-parallel stages.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use qent_core::dataset::{build_pptes_set, build_training_set, Strategy};
use qent_core::entanglement::{negativities, PptesFamily};
use qent_core::model::{batch_loss, build_cnn, predict_batch, ArchConfig, Objective};
use qent_core::Execution;

fn modes() -> Vec<(&'static str, Execution)> {
    let mut v = vec![("sequential", Execution::Sequential)];
    if Execution::default().is_parallel() {
        v.push(("parallel", Execution::default()));
    }
    v
}

fn bench_generation(c: &mut Criterion) {
    let mut group = c.benchmark_group("generate");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::new(name, "train-n3-330"), &exec, |b, &exec| {
            b.iter(|| build_training_set(3, Strategy::Verified, 0.001, 7, exec).unwrap());
        });
    }
    group.finish();
}

fn bench_labeling(c: &mut Criterion) {
    let mut group = c.benchmark_group("negativity");
    for n in [3, 4] {
        let ds = build_pptes_set(PptesFamily::Horodecki, n, 0.02, 1, Execution::Sequential).unwrap();
        let rhos: Vec<_> = ds.records.iter().map(|r| r.rho.clone()).collect();
        for (name, exec) in modes() {
            group.bench_with_input(BenchmarkId::new(name, format!("n{n}-{}", rhos.len())), &exec, |b, &exec| {
                b.iter(|| exec.map_slice(&rhos, negativities));
            });
        }
    }
    group.finish();
}

fn bench_model(c: &mut Criterion) {
    let ds = build_training_set(3, Strategy::Negativity, 0.001, 3, Execution::Sequential).unwrap();
    let model = build_cnn(&ArchConfig::new(3), 1).unwrap();
    let batch: Vec<_> = ds.records.iter().take(64).collect();
    let rhos: Vec<_> = ds.records.iter().map(|r| &r.rho).collect();

    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::new(name, "predict-330"), &exec, |b, &exec| {
            b.iter(|| predict_batch(&model, &rhos, exec).unwrap());
        });
        group.bench_with_input(BenchmarkId::new(name, "grad-batch64"), &exec, |b, &exec| {
            b.iter(|| batch_loss(&model, &batch, &Objective::Cnn, exec, true).unwrap());
        });
    }
    group.finish();
}

criterion_group!(benches, bench_generation, bench_labeling, bench_model);
criterion_main!(benches);
