use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use modalcompose::numcore::{Activation, Mlp, MlpSpec, ParamSet};
use modalcompose::rng::seeded;
use modalcompose::router::RouterConfig;
use modalcompose::{
    compose_policy, manual_compose, train_expert, Policy, Router, RoutingStrategy, TrainConfig,
};
use modalcompose_bench::{experts, fixture};

fn mlp_infer(c: &mut Criterion) {
    let mlp = Mlp::new(
        "net",
        MlpSpec::new(66, &[64, 64], 2, Activation::Tanh).unwrap(),
    );
    let mut params = ParamSet::new();
    mlp.init(&mut params, &mut seeded(0)).unwrap();
    let x = vec![0.1; 66];
    c.bench_function("mlp_infer_66x64x64x2", |b| {
        b.iter(|| mlp.infer(&params, black_box(&x)).unwrap())
    });
}

fn sampling(c: &mut Criterion) {
    let (ds, cfg, sched) = fixture();
    let ex = experts(&ds, &cfg, &sched);
    let obs = ds.episodes[0].steps[0].observation.clone();
    let equal = manual_compose(ex.clone(), &[0.5, 0.5], sched.clone()).unwrap();
    let mods: Vec<(String, usize)> = ex
        .iter()
        .map(|e| {
            (
                e.modality.clone(),
                modalcompose::experts::ScoreExpert::embedding_dim(e),
            )
        })
        .collect();
    let router = Router::init(&mods, &RouterConfig::default(), &mut seeded(3)).unwrap();
    let routed = compose_policy(ex, router, RoutingStrategy::Soft, sched).unwrap();
    let mut rng = seeded(1);
    c.bench_function("ddpm_sample_equal_weights_k50", |b| {
        b.iter(|| equal.act(black_box(&obs), &mut rng).unwrap())
    });
    c.bench_function("ddpm_sample_routed_k50", |b| {
        b.iter(|| routed.act(black_box(&obs), &mut rng).unwrap())
    });
}

fn training_step(c: &mut Criterion) {
    let (ds, cfg, sched) = fixture();
    let train = TrainConfig {
        steps: 1,
        batch: 64,
        lr: 1e-3,
    };
    c.bench_function("expert_train_step_batch64", |b| {
        b.iter(|| train_expert(&ds, "vis", &cfg, &train, &sched, &mut seeded(2)).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = mlp_infer, sampling, training_step
}
criterion_main!(benches);
