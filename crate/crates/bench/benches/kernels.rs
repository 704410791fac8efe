use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tbvlm_core::metrics::{roc_auc, roc_curve, trapezoid};
use tbvlm_core::Tensor;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("matmul");
    for n in [64, 128, 256] {
        let a = random(&mut rng, &[n, n]);
        let b = random(&mut rng, &[n, n]);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    group.finish();
}

fn softmax_and_norm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[65, 256]);
    let gain = Tensor::ones(&[256]);
    let bias = Tensor::zeros(&[256]);
    c.bench_function("softmax 65x256", |b| b.iter(|| black_box(x.softmax(1).unwrap())));
    c.bench_function("layer_norm 65x256", |b| {
        b.iter(|| black_box(x.layer_norm(&gain, &bias, 1e-5).unwrap()))
    });
}

// Pair counting against the curve integral on the evaluation set size.
fn auc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut group = c.benchmark_group("auc");
    for n in [500, 10_000] {
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0.0..1.0f64) * 100.0).round()).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
        group.bench_with_input(BenchmarkId::new("pair_counting", n), &n, |b, _| {
            b.iter(|| black_box(roc_auc(&scores, &labels).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("trapezoid", n), &n, |b, _| {
            b.iter(|| black_box(trapezoid(&roc_curve(&scores, &labels).unwrap())))
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, softmax_and_norm, auc);
criterion_main!(benches);
