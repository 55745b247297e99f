use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::foundation::{Real, Tensor};

/// Saved position of an [`RngStream`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream_id: u64,
    pub counter: u64,
}

/// Counter-based random stream: `(seed, stream_id)` selects an independent
/// ChaCha keystream and `counter` is the word position inside it.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    /// Independent child stream; depends only on `(seed, stream_id, key)`,
    /// never on how far this stream has advanced.
    pub fn derive(&self, key: u64) -> Self {
        Self::new(self.seed, splitmix64(self.stream_id ^ splitmix64(key)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.rng.get_word_pos() as u64
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream_id: self.stream_id,
            counter: self.counter(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut s = Self::new(state.seed, state.stream_id);
        s.rng.set_word_pos(u128::from(state.counter));
        s
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform_f64(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal_f64(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.normal_f64())).collect();
        Tensor::from_vec(shape, data).expect("shape product")
    }

    pub fn uniform<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.uniform_f64())).collect();
        Tensor::from_vec(shape, data).expect("shape product")
    }
}
