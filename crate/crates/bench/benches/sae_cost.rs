use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scg_breath::sae::SparseAutoencoder;

fn sae_cost(c: &mut Criterion) {
    let batch = scg_breath_bench::random_matrix(1033, 15, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ae = SparseAutoencoder::new_random(15, 12, 0.5, 0.001, 4.0, &mut rng);
    c.bench_function("sae_cost_and_gradient_1033x15", |b| b.iter(|| ae.cost_and_gradient(&batch).unwrap()));
}

criterion_group!(benches, sae_cost);
criterion_main!(benches);
