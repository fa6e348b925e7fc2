//! Direct vs FFT dose convolution, and the same kernels on one thread vs the full pool.
//!
//! Without the `parallel` feature both pool sizes run the sequential code path.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dvk_core::dosimetry::{convolve3d_direct, convolve3d_fft};
use dvk_core::nn::Mode;
use dvk_core::pca::covariance;
use dvk_core::unet::{build_unet, UNetSpec};
use dvk_core::Tensor;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.0..1.0))
}

#[cfg(feature = "parallel")]
fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let n = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut sizes = vec![1];
    if n > 1 {
        sizes.push(n);
    }
    sizes
        .into_iter()
        .map(|t| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap();
            (format!("{t}t"), pool)
        })
        .collect()
}

#[cfg(feature = "parallel")]
fn run<R: Send>(pool: &rayon::ThreadPool, f: impl FnOnce() -> R + Send) -> R {
    pool.install(f)
}

#[cfg(not(feature = "parallel"))]
fn pools() -> Vec<(String, ())> {
    vec![("seq".to_string(), ())]
}

#[cfg(not(feature = "parallel"))]
fn run<R>(_: &(), f: impl FnOnce() -> R) -> R {
    f()
}

fn dose_convolution(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let kernel = random(&mut rng, &[9, 9, 9]);
    let mut group = c.benchmark_group("dose_convolution");
    group.sample_size(10);
    for n in [32usize, 64] {
        let decays = random(&mut rng, &[n, n, n]);
        for (label, pool) in pools() {
            group.bench_with_input(BenchmarkId::new(format!("direct/{label}"), n), &n, |b, _| {
                b.iter(|| run(&pool, || convolve3d_direct(black_box(&decays), black_box(&kernel)).unwrap()))
            });
            group.bench_with_input(BenchmarkId::new(format!("fft/{label}"), n), &n, |b, _| {
                b.iter(|| run(&pool, || convolve3d_fft(black_box(&decays), black_box(&kernel)).unwrap()))
            });
        }
    }
    group.finish();
}

fn unet_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[8, 9, 9, 9]);
    let mut group = c.benchmark_group("unet_forward");
    group.sample_size(10);
    for (label, pool) in pools() {
        let mut net = build_unet(&UNetSpec::default()).unwrap();
        net.set_mode(Mode::Infer);
        group.bench_function(format!("batch8/{label}"), |b| {
            b.iter(|| run(&pool, || net.predict(black_box(&x)).unwrap()))
        });
    }
    group.finish();
}

fn kernel_covariance(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let samples = random(&mut rng, &[600, 729]);
    let mut group = c.benchmark_group("covariance");
    group.sample_size(10);
    for (label, pool) in pools() {
        group.bench_function(format!("600x729/{label}"), |b| {
            b.iter(|| run(&pool, || covariance(black_box(&samples)).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, dose_convolution, unet_forward, kernel_covariance);
criterion_main!(benches);
