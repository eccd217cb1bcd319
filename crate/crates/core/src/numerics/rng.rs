//! Seeded, counter-based random streams.
//!
//! Every consumer of randomness asks for a stream by purpose plus a list of
//! integer keys (epoch, step, user, ...). Streams are independent ChaCha8
//! instances sharing the run seed and differing in their stream id, so the
//! draws for one purpose never shift when another purpose consumes more or
//! fewer numbers.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;

/// What a stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    ParamInit = 1,
    Shuffle = 2,
    WarmStart = 3,
    ChainNoise = 4,
    Candidates = 5,
    Dropout = 6,
    Synth = 7,
    Codebook = 8,
    EvalNoise = 9,
    Misc = 10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomSource {
    seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Opens the stream identified by `purpose` and `keys`.
    pub fn stream(&self, purpose: Purpose, keys: &[u64]) -> StreamRng {
        let mut id = splitmix(purpose as u64);
        for &k in keys {
            id = splitmix(id ^ k.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        StreamRng::Live(Box::new(rng))
    }
}

/// A single random stream. `Zero` yields exact zeros from every Gaussian
/// draw and is used to switch noise off.
#[derive(Debug, Clone)]
pub enum StreamRng {
    Live(Box<ChaCha8Rng>),
    Zero,
}

impl StreamRng {
    pub fn zero() -> Self {
        StreamRng::Zero
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, StreamRng::Zero)
    }

    pub fn next_u64(&mut self) -> u64 {
        match self {
            StreamRng::Live(r) => r.next_u64(),
            StreamRng::Zero => 0,
        }
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        match self {
            StreamRng::Live(r) => r.random::<f64>(),
            StreamRng::Zero => 0.0,
        }
    }

    pub fn below(&mut self, n: usize) -> usize {
        match self {
            StreamRng::Live(r) => r.random_range(0..n),
            StreamRng::Zero => 0,
        }
    }

    pub fn normal(&mut self) -> f64 {
        match self {
            StreamRng::Live(r) => StandardNormal.sample(r.as_mut()),
            StreamRng::Zero => 0.0,
        }
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        if let StreamRng::Live(r) = self {
            xs.shuffle(r.as_mut());
        }
    }
}

/// I.i.d. standard normal tensor of the given shape.
pub fn gaussian_draw(rng: &mut StreamRng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normals(n)).expect("shape product matches")
}
