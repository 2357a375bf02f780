//! Parallel versus single-worker timings for batch certification, Monte
//! Carlo ball sampling, and the conv/GEMM kernels.
//!
//! With the default `parallel` feature each benchmark runs twice: on the
//! global rayon pool and inside a one-thread pool. Building with
//! `--no-default-features` benchmarks the plain sequential code path.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparsecert::data::{Dataset, Normalization, Split};
use sparsecert::eval::{self, EvalOptions};
use sparsecert::lirpa::{self, CrownOptions, Engine, PerturbSpec};
use sparsecert::net::{presets, Network};
use sparsecert::tensor::{conv2d, ConvGeom, Tensor};

fn modes() -> Vec<(&'static str, Option<usize>)> {
    let mut m = vec![("sequential", Some(1))];
    if cfg!(feature = "parallel") {
        m.push(("parallel", None));
    }
    m
}

fn run_in<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
        return pool.install(f);
    }
    let _ = threads;
    f()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
}

fn small_net() -> Network<f32> {
    let arch = presets::architecture("cnn-small", &[1, 28, 28], 10).unwrap();
    Network::build(arch, 0).unwrap()
}

fn batch_eval(c: &mut Criterion) {
    let net = small_net();
    let n = 512;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let labels = (0..n).map(|_| rng.gen_range(0..10)).collect();
    let ds = Dataset::new(
        random(&[n, 1, 28, 28], 2),
        labels,
        10,
        Split::Test,
        Normalization::mnist(),
    )
    .unwrap();
    let mut group = c.benchmark_group("batch_eval");
    group.sample_size(10);
    for engine in [Engine::Ibp, Engine::CrownIbp] {
        let opts = EvalOptions {
            engine,
            batch_size: 64,
            ..Default::default()
        };
        for (mode, threads) in modes() {
            group.bench_function(BenchmarkId::new(format!("{engine}"), mode), |b| {
                b.iter(|| run_in(threads, || black_box(eval::certify(&net, &ds, 0.1, &opts).unwrap())))
            });
        }
    }
    group.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let net = small_net();
    let x0 = random(&[1, 1, 28, 28], 3);
    let eps = 0.1f32;
    let mut group = c.benchmark_group("monte_carlo");
    group.sample_size(10);
    for (mode, threads) in modes() {
        group.bench_function(BenchmarkId::new("ball_1000", mode), |b| {
            b.iter(|| {
                run_in(threads, || {
                    let mut rng = ChaCha8Rng::seed_from_u64(4);
                    let pts = Tensor::from_fn(&[1000, 1, 28, 28], |i| {
                        x0.data()[i % 784] + rng.gen_range(-eps..=eps)
                    });
                    black_box(net.forward(&pts).unwrap())
                })
            })
        });
        group.bench_function(BenchmarkId::new("crown_margin_64", mode), |b| {
            let x = random(&[64, 1, 28, 28], 5);
            let labels: Vec<usize> = (0..64).map(|i| i % 10).collect();
            let spec = PerturbSpec::new(x, 0.1);
            b.iter(|| {
                run_in(threads, || {
                    black_box(
                        lirpa::margin_lower(&net, &spec, &labels, Engine::CrownIbp, CrownOptions::default())
                            .unwrap(),
                    )
                })
            })
        });
    }
    group.finish();
}

fn kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("kernels");
    let a = random(&[512, 784], 6);
    let w = random(&[256, 784], 7);
    let x = random(&[128, 8, 14, 14], 8);
    let k = random(&[16, 8, 4, 4], 9);
    let geom = ConvGeom { stride: 2, padding: 1 };
    for (mode, threads) in modes() {
        group.bench_function(BenchmarkId::new("gemm_512x784x256", mode), |b| {
            b.iter(|| run_in(threads, || black_box(a.matmul_nt(&w).unwrap())))
        });
        group.bench_function(BenchmarkId::new("conv_128x8x14x14", mode), |b| {
            b.iter(|| run_in(threads, || black_box(conv2d(&x, &k, None, geom).unwrap())))
        });
    }
    group.finish();
}

criterion_group!(benches, batch_eval, monte_carlo, kernels);
criterion_main!(benches);
