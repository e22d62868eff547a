//! Seedable, splittable run RNG with a portable, serializable state.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::{hex, short_digest};

/// Algorithm identifier written into run manifests.
pub const RNG_ALGORITHM: &str = "chacha8/rand_chacha-0.3";

/// Named sub-streams of one run seed.
pub mod stream {
    pub const ENGINE: u64 = 0;
    pub const SEEDING: u64 = 1;
    pub const TOY_MODEL: u64 = 2;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunRng {
    inner: ChaCha8Rng,
}

/// Serializable position of a [`RunRng`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    pub stream: u64,
    /// Word position in the keystream, as a decimal string (it is a u128).
    pub word_pos: String,
}

impl RunRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::from_seed(expand_seed(seed));
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::new(seed, stream::ENGINE)
    }

    /// Independent stream keyed by the same seed.
    pub fn fork(seed: u64, stream: u64) -> Self {
        Self::new(seed, stream)
    }

    pub fn state(&self, seed: u64) -> RngState {
        RngState {
            algorithm: RNG_ALGORITHM.to_string(),
            seed,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos().to_string(),
        }
    }

    pub fn restore(state: &RngState) -> Result<Self, String> {
        if state.algorithm != RNG_ALGORITHM {
            return Err(format!("unsupported rng algorithm `{}`", state.algorithm));
        }
        let pos: u128 = state
            .word_pos
            .parse()
            .map_err(|_| format!("bad word_pos `{}`", state.word_pos))?;
        let mut rng = Self::new(state.seed, state.stream);
        rng.inner.set_word_pos(pos);
        Ok(rng)
    }

    pub fn digest(&self) -> String {
        let mut buf = self.inner.get_seed().to_vec();
        buf.extend(self.inner.get_stream().to_le_bytes());
        buf.extend(self.inner.get_word_pos().to_le_bytes());
        short_digest(&buf)
    }

    pub fn seed_hex(&self) -> String {
        hex(&self.inner.get_seed())
    }
}

/// Spreads a 64-bit seed over the 32-byte ChaCha key with SplitMix64.
fn expand_seed(seed: u64) -> [u8; 32] {
    let mut out = [0u8; 32];
    let mut state = seed;
    for chunk in out.chunks_mut(8) {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    out
}

impl RngCore for RunRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// Uniform in `[0, 1)` from the top 53 bits, independent of `rand` internals.
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
