//! Sharded evaluation and teacher training on a one-thread pool against the
//! default rayon pool. Results are bit-identical across pools; only time differs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use distilab::data::{make_mixture, MixtureConfig};
use distilab::metrics::diversity;
use distilab::nets::{BeMlp, Classifier, ModelSpec, RankOneInit};
use distilab::optim::{train_teachers, OptimConfig};
use distilab::rng;
use rayon::ThreadPoolBuilder;

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let default = ThreadPoolBuilder::new().build().unwrap();
    let n = default.current_num_threads();
    vec![
        ("sequential".into(), ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        (format!("parallel-{n}"), default),
    ]
}

fn evaluation(c: &mut Criterion) {
    let cfg = MixtureConfig {
        n_per_class: 4000,
        ..MixtureConfig::default()
    };
    let x = make_mixture(&cfg, 0).unwrap().train.x;
    let spec = ModelSpec::batch_ensemble(2, 3, vec![64, 64], 4);
    let be = BeMlp::init(&spec, RankOneInit::RandomSign, &mut rng::stream(0, rng::INIT)).unwrap();

    let mut group = c.benchmark_group("evaluation");
    for (name, pool) in pools() {
        group.bench_with_input(BenchmarkId::new("be_logits", &name), &x, |b, x| {
            b.iter(|| pool.install(|| be.predictive_logits(x).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("diversity", &name), &x, |b, x| {
            b.iter(|| pool.install(|| diversity(&be, x).unwrap()))
        });
    }
    group.finish();
}

fn teachers(c: &mut Criterion) {
    let data = make_mixture(
        &MixtureConfig {
            n_per_class: 200,
            ..MixtureConfig::default()
        },
        0,
    )
    .unwrap()
    .train;
    let spec = ModelSpec::plain(2, 3, vec![32, 32]);
    let ocfg = OptimConfig {
        epochs: 3,
        warmup_epochs: 1,
        ..OptimConfig::default()
    };

    let mut group = c.benchmark_group("train_teachers");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("m4", &name), |b| {
            b.iter(|| pool.install(|| train_teachers(&spec, &data, 4, &ocfg).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, evaluation, teachers);
criterion_main!(benches);
