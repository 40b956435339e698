//! Counter-based random streams keyed by simulation entities.
//!
//! Every stochastic draw in the simulator is addressed by a key built from the
//! global seed and the ids of the entities involved (neurons, columns, steps),
//! never by the position of the draw in some sequential stream. This is what
//! makes network construction and dynamics independent of the worker count.

use rand::RngCore;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// What a stream is used for. Keeps the streams of different purposes for the
/// same entity disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Connect = 1,
    Weight = 2,
    Delay = 3,
    External = 4,
    InitialState = 5,
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// SplitMix64 evaluated at an arbitrary counter position: `output(i) =
/// mix(key + (i + 1) * gamma)`. Any element of the stream can be computed
/// without generating the ones before it.
#[derive(Debug, Clone)]
pub struct KeyedRng {
    key: u64,
    counter: u64,
}

impl KeyedRng {
    pub fn new(seed: u64, purpose: Purpose, a: u64, b: u64) -> Self {
        let mut key = mix64(seed ^ GOLDEN_GAMMA);
        key = mix64(key ^ (purpose as u64).wrapping_mul(0xd6e8_feb8_6659_fd93));
        key = mix64(key ^ a.wrapping_mul(0xa076_1d64_78bd_642f));
        key = mix64(key ^ b.wrapping_mul(0xe703_7ed1_a0b4_28db));
        Self { key, counter: 0 }
    }

    /// Value at position `index` of the stream, independent of the cursor.
    #[inline]
    pub fn at(&self, index: u64) -> u64 {
        mix64(self.key.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`, safe to pass to `ln`.
    #[inline]
    pub fn uniform_open0(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for KeyedRng {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        let v = self.at(self.counter);
        self.counter += 1;
        v
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let v = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}
