//! Parallel vs sequential kernels.
//!
//! With the `parallel` feature each kernel runs twice: inside a one-thread
//! rayon pool ("sequential") and on the default pool ("parallel"). Without
//! the feature only the sequential path exists:
//!
//!     cargo bench -p ctrtab-core
//!     cargo bench -p ctrtab-core --no-default-features

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ctrtab::control::{BundleFlags, ControlParams, ModelBundle, Process, ZeroConvKind};
use ctrtab::denoiser::DenoiserParams;
use ctrtab::encode::EncoderState;
use ctrtab::eval::ndcr::ndcr;
use ctrtab::rng::{sample_normal, Rng, Stream};
use ctrtab::sampler::{sample_batch, SampleConfig};
use ctrtab::synthgen::{generate, SynthSpec};

fn modes() -> Vec<(&'static str, Option<usize>)> {
    if ctrtab::par::is_parallel() {
        vec![("sequential", Some(1)), ("parallel", None)]
    } else {
        vec![("sequential", None)]
    }
}

#[cfg(feature = "parallel")]
fn in_mode<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("pool")
            .install(f),
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn in_mode<R: Send>(_threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    f()
}

fn matmul(c: &mut Criterion) {
    let mut rng = Rng::new(0, Stream::Data);
    let a = sample_normal(&mut rng, &[512, 128]);
    let b = sample_normal(&mut rng, &[128, 128]);
    let mut g = c.benchmark_group("matmul_512x128x128");
    for (name, threads) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| in_mode(threads, || a.matmul(&b).unwrap()))
        });
    }
    g.finish();
}

fn sampling(c: &mut Criterion) {
    let table = generate(&SynthSpec::binary(500, 20, 5, 1.0, 0)).unwrap();
    let encoder = EncoderState::fit(&table).unwrap();
    let pool = encoder.encode(&table).unwrap().matrix;
    let den = DenoiserParams::init(&mut Rng::new(1, Stream::Init), encoder.dim(), 64).unwrap();
    let ctrl = ControlParams::attach(&den, ZeroConvKind::Dense, 0.005).unwrap();
    let bundle = ModelBundle {
        denoiser: den,
        control: Some(ctrl),
        process: Process::ddpm(50).unwrap(),
        encoder,
        flags: BundleFlags::default(),
    };
    let cfg = SampleConfig {
        chunk_size: 64,
        ..SampleConfig::default()
    };
    let mut g = c.benchmark_group("sample_512_rows_T50");
    g.sample_size(10);
    for (name, threads) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| in_mode(threads, || sample_batch(&bundle, Some(&pool), 512, &cfg).unwrap()))
        });
    }
    g.finish();
}

fn ndcr_bench(c: &mut Criterion) {
    let mut rng = Rng::new(2, Stream::Data);
    let syn = sample_normal(&mut rng, &[1000, 50]);
    let train = sample_normal(&mut rng, &[2000, 50]);
    let test = sample_normal(&mut rng, &[500, 50]);
    let mut g = c.benchmark_group("ndcr_1000x2500x50");
    g.sample_size(10);
    for (name, threads) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| in_mode(threads, || ndcr(&syn, &train, &test).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, sampling, ndcr_bench);
criterion_main!(benches);
