//! Seeded random streams.
//!
//! A run seed fans out into independent named streams (noise, init, data),
//! each a ChaCha8 generator keyed by the same seed on a distinct stream id.
//! Normal draws use the Box–Muller transform; Laplace draws use the inverse
//! CDF `u ↦ -b·sign(u)·ln(1 - 2|u|)` with `u` uniform on (-½, ½).

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Noise,
    Init,
    Data,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Noise => 1,
            Stream::Init => 2,
            Stream::Data => 3,
        }
    }
}

/// One reproducible random stream.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self::with_stream_id(seed, stream.id())
    }

    fn with_stream_id(seed: u64, id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(id);
        Self { inner }
    }

    /// Child stream for shard `index`; used to split batch work across
    /// workers without sharing a generator.
    pub fn derived(seed: u64, stream: Stream, index: u64) -> Self {
        Self::with_stream_id(derive_seed(seed, index), stream.id())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire-free rejection keeps the draw count deterministic per value.
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let (a, b) = self.box_muller();
            pair[0] = a;
            pair[1] = b;
        }
        if let [last] = chunks.into_remainder() {
            *last = self.box_muller().0;
        }
    }

    fn box_muller(&mut self) -> (f64, f64) {
        let u1 = self.uniform_open();
        let u2 = self.uniform_open();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }

    pub fn normal(&mut self) -> f64 {
        self.box_muller().0
    }

    pub fn laplace(&mut self, b: f64) -> f64 {
        let u = self.uniform_open() - 0.5;
        -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// SplitMix64 finalizer over `(seed, index)`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The three streams of one run.
#[derive(Debug, Clone)]
pub struct RngStreams {
    pub seed: u64,
    pub noise: Rng,
    pub init: Rng,
    pub data: Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            noise: Rng::new(seed, Stream::Noise),
            init: Rng::new(seed, Stream::Init),
            data: Rng::new(seed, Stream::Data),
        }
    }
}

/// I.i.d. standard normal tensor.
pub fn sample_normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    rng.fill_normal(t.data_mut());
    t
}

/// I.i.d. Laplace(0, b) tensor; variance is 2b².
pub fn sample_laplace(rng: &mut Rng, b: f64, shape: &[usize]) -> Result<Tensor> {
    if !(b > 0.0) || !b.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "Laplace scale must be positive and finite, got {b}"
        )));
    }
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.laplace(b);
    }
    Ok(t)
}

/// I.i.d. uniform on `[-a, a]`.
pub fn sample_uniform_sym(rng: &mut Rng, a: f64, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = a * (2.0 * rng.uniform_open() - 1.0);
    }
    t
}
