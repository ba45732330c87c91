//! Seeded random streams and Gumbel-Softmax sampling.
//!
//! The generator is SplitMix64 (Steele et al. 2014): a 64-bit counter
//! advanced by the golden-ratio increment and finalized by two
//! multiply-xorshift rounds. It is tiny, well studied, and bit-stable
//! across platforms, which makes all stochastic behavior a pure function
//! of `(seed, stream_id)`. Streams never share state; concurrent use goes
//! through [`RngStream::child`], keyed deterministically by a label.
//!
//! Raw uniforms are always drawn in `f64` and converted to the target
//! scalar, so `f32` and `f64` kernels consume the same underlying draw
//! sequence.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer: bijective 64-bit mix.
fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

/// FNV-1a 64-bit hash; stable across platforms. Used to derive stream ids
/// from component names.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Seedable, splittable random stream.
///
/// Identical `(seed, stream_id)` produce identical output sequences across
/// runs and platforms.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    state: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream_id: u64) -> Self {
        let state = mix64(mix64(seed) ^ mix64(stream_id ^ GOLDEN));
        RngStream {
            seed,
            stream_id,
            state,
        }
    }

    /// Stream derived from a top-level seed and a component name
    /// (`fnv1a64(name)` becomes the stream id).
    pub fn named(seed: u64, name: &str) -> Self {
        Self::with_stream(seed, fnv1a64(name.as_bytes()))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Child stream keyed by `label`. Depends only on `(seed, stream_id,
    /// label)`, never on how many values the parent has drawn.
    pub fn child(&self, label: u64) -> RngStream {
        Self::with_stream(self.seed, mix64(self.stream_id ^ mix64(label ^ GOLDEN)))
    }

    /// Child stream keyed by a component name.
    pub fn child_named(&self, name: &str) -> RngStream {
        self.child(fnv1a64(name.as_bytes()))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform clamped to `[1e-12, 1 - 1e-12]`, safe for `log(log(u))`.
    pub fn uniform_open(&mut self) -> f64 {
        self.next_f64().clamp(1e-12, 1.0 - 1e-12)
    }

    /// Uniform index in `[0, n)`. Uses modulo reduction; the bias at
    /// desk-scale `n` is below 2^-32 and determinism is what matters here.
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn normal<T: Scalar>(&mut self, mean: f64, std: f64) -> T {
        T::from_f64_c(mean + std * self.next_normal())
    }

    /// Gumbel(0,1) sample.
    pub fn next_gumbel(&mut self) -> f64 {
        gumbel_from_uniform(self.uniform_open())
    }

    /// Seeded in-place Fisher-Yates shuffle.
    pub fn shuffle<E>(&mut self, data: &mut [E]) {
        for i in (1..data.len()).rev() {
            let j = self.next_index(i + 1);
            data.swap(i, j);
        }
    }
}

/// The Gumbel transform `g = -log(-log(u))`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Tensor of i.i.d. Gumbel(0,1) noise. Carries no gradient: noise enters
/// tapes as a constant, independent of network parameters.
pub fn gumbel_noise<T: Scalar>(shape: Vec<usize>, rng: &mut RngStream) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::from_f64_c(rng.next_gumbel()))
        .collect();
    Tensor::new(shape, data).expect("gumbel noise is finite by clamping")
}

/// Noise injection policy for stochastic operations. `Zero` is the test
/// hook that collapses Gumbel-Softmax onto plain softmax.
pub enum NoiseSource<'a> {
    Rng(&'a mut RngStream),
    Zero,
}

impl NoiseSource<'_> {
    pub fn gumbel<T: Scalar>(&mut self, shape: Vec<usize>) -> Tensor<T> {
        match self {
            NoiseSource::Rng(rng) => gumbel_noise(shape, rng),
            NoiseSource::Zero => Tensor::zeros(shape),
        }
    }
}

/// `softmax((scores + g)/temperature)` along `axis` with fresh Gumbel
/// noise `g`. Raw scores act as unnormalized log-weights; each slice along
/// `axis` sums to 1.
pub fn gumbel_softmax<T: Scalar>(
    scores: &Tensor<T>,
    temperature: T,
    rng: &mut RngStream,
    axis: usize,
) -> Result<Tensor<T>> {
    let noise = gumbel_noise(scores.shape().to_vec(), rng);
    gumbel_softmax_with_noise(scores, &noise, temperature, axis)
}

/// Gumbel-Softmax with caller-supplied noise (shared-noise experiments and
/// the zero-noise hook).
pub fn gumbel_softmax_with_noise<T: Scalar>(
    scores: &Tensor<T>,
    noise: &Tensor<T>,
    temperature: T,
    axis: usize,
) -> Result<Tensor<T>> {
    if scores.shape() != noise.shape() {
        return Err(Error::shape("gumbel_softmax", scores.shape(), noise.shape()));
    }
    let perturbed = Tensor::new(
        scores.shape().to_vec(),
        scores
            .data()
            .iter()
            .zip(noise.data())
            .map(|(&s, &g)| s + g)
            .collect(),
    )?;
    perturbed.softmax(axis, temperature)
}

/// Gumbel-max draw: `argmax(scores + g)`. Not differentiable; used for
/// verifying the Gumbel-max law, never on the training path.
pub fn sample_categorical<T: Scalar>(scores: &Tensor<T>, rng: &mut RngStream) -> Result<usize> {
    if scores.ndim() != 1 {
        return Err(Error::contract(
            "sample_categorical",
            format!("expected a 1-D score vector, got shape {:?}", scores.shape()),
        ));
    }
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &s) in scores.data().iter().enumerate() {
        let v = s.to_f64_c() + rng.next_gumbel();
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    Ok(best)
}
