use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use gudn_core::harness::train::model_config;
use gudn_core::metrics::{evaluate_samples, EvalOptions};
use gudn_core::{
    build_clusters, gen_synthetic, label_bow, reinforce, AblationMode, Batch, DatasetBundle, GudnModel, ReinforceMode, SynthConfig,
    TrainConfig,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(num_labels: usize) -> DatasetBundle {
    gen_synthetic(&SynthConfig {
        num_labels,
        n_train: 256,
        n_test: 256,
        noise_tokens: 10,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.encoder.num_layers = 2;
    cfg.encoder.hidden_dim = 32;
    cfg.encoder.num_heads = 2;
    cfg.encoder.ffn_dim = 64;
    cfg.encoder.max_input_len = 32;
    cfg
}

fn metrics(c: &mut Criterion) {
    let data = dataset(64);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let labels: Vec<usize> = (0..data.num_labels()).collect();
    let rankings: Vec<Vec<usize>> = data
        .test
        .iter()
        .map(|_| labels.choose_multiple(&mut rng, 5).copied().collect())
        .collect();
    let opts = EvalOptions::default();
    c.bench_function("evaluate 256 samples", |b| {
        b.iter(|| evaluate_samples(black_box(&rankings), &data.test, &data, &opts).unwrap())
    });
}

fn encoder(c: &mut Criterion) {
    let data = dataset(16);
    let model = GudnModel::new(model_config(&small_config(), &data, None, None), None, 0).unwrap();
    let texts: Vec<_> = data.test.iter().take(16).map(|s| s.text_tokens.clone()).collect();
    c.bench_function("predict batch of 16", |b| b.iter(|| model.predict(black_box(&texts), 5).unwrap()));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let labels = data
        .train
        .iter()
        .take(8)
        .map(|s| Ok(reinforce(ReinforceMode::None, &data.label_groups_of(s), 32, &mut rng)?.ids))
        .collect::<gudn_core::Result<Vec<_>>>()
        .unwrap();
    let batch = Batch::new(
        data.train.iter().take(8).map(|s| s.text_tokens.clone()).collect(),
        Some(labels),
        data.train.iter().take(8).map(|s| s.positive_labels.clone()).collect(),
        AblationMode::Full,
    )
    .unwrap();
    c.bench_function("loss and gradients, batch of 8", |b| {
        b.iter(|| model.loss_and_grads(black_box(&batch), AblationMode::Full, None).unwrap())
    });
}

fn clustering(c: &mut Criterion) {
    let data = dataset(1024);
    let bow = label_bow(&data);
    c.bench_function("cluster 1024 labels", |b| b.iter(|| build_clusters(black_box(&bow), 32, 0).unwrap()));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let groups = data.label_groups_of(&data.train[0]);
    c.bench_function("disordered reinforcement", |b| {
        b.iter_batched(|| groups.clone(), |g| reinforce(ReinforceMode::Disordered, &g, 256, &mut rng).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group!(benches, metrics, encoder, clustering);
criterion_main!(benches);
