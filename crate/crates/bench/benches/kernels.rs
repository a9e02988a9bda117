use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use madd_core::agda::{augment_batch, AgdaConfig};
use madd_core::data::{synthesize, SynthConfig};
use madd_core::metrics::auc;
use madd_core::nn::Mode;
use madd_core::pooling::bap;
use madd_core::{AttentionMaps, MultiAttentionModel, Tensor, TrainConfig, Trainer};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
}

fn bench_bap(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random(&[16, 4, 16, 16], &mut rng);
    let f = random(&[16, 16, 16, 16], &mut rng);
    c.bench_function("bap 16x4x16x16 over 16 channels", |b| b.iter(|| bap(&a, &f).unwrap()));
}

fn bench_model(c: &mut Criterion) {
    let cfg = TrainConfig::desk();
    let mut model = MultiAttentionModel::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[16, 3, 64, 64], &mut rng);
    c.bench_function("forward desk batch 16", |b| {
        b.iter(|| model.forward_full(&x, Mode::Eval, None).unwrap())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let data = synthesize(&SynthConfig {
        videos: 16,
        frames_per_video: 1,
        ..Default::default()
    })
    .unwrap();
    let idx: Vec<usize> = (0..16).collect();
    let (x, y) = data.batch(&idx);
    let mut trainer = Trainer::new(TrainConfig::desk()).unwrap();
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("two-pass step desk batch 16", |b| {
        b.iter(|| trainer.train_step(&x, &y, &data.ids).unwrap())
    });
    g.finish();
}

fn bench_agda(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[16, 3, 64, 64], &mut rng);
    let maps = AttentionMaps::new(random(&[16, 4, 8, 8], &mut rng)).unwrap();
    let cfg = AgdaConfig::default();
    c.bench_function("soft AGDA batch 16 at 64px", |b| {
        b.iter(|| augment_batch(&x, &maps, &cfg, &mut rng).unwrap())
    });
}

fn bench_auc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..1.0)).collect();
    let y: Vec<u8> = (0..10_000).map(|_| rng.random_range(0..2)).collect();
    c.bench_function("auc 10k scores", |b| b.iter(|| auc(&s, &y)));
}

criterion_group!(benches, bench_bap, bench_model, bench_train_step, bench_agda, bench_auc);
criterion_main!(benches);
