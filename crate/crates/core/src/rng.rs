//! Deterministic counter-based random streams.
//!
//! The generator is SplitMix64 written in counter form: the `n`-th output of a
//! stream with key `k` is `mix64(k + (n + 1) * 0x9E3779B97F4A7C15)` (wrapping
//! arithmetic), where `mix64` is the SplitMix64 finalizer
//!
//! ```text
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! z ^ (z >> 31)
//! ```
//!
//! A stream is identified by `(seed, stream id)`; its key is
//! `mix64(mix64(seed) ^ mix64(id + 0x9E3779B97F4A7C15))`. The full state is the
//! pair `(key, counter)`, serialized as 16 little-endian bytes. Floats in
//! `[0, 1)` take the top 53 bits of an output; bounded integers use rejection
//! on the 64-bit range; normals use Box-Muller (cosine branch only).

use crate::scalar::Scalar;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Named streams drawn from a single run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Data = 3,
    Attack = 4,
    Sampling = 5,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self::with_id(seed, stream as u64)
    }

    pub fn with_id(seed: u64, id: u64) -> Self {
        CounterRng {
            key: mix64(mix64(seed) ^ mix64(id.wrapping_add(GAMMA))),
            counter: 0,
        }
    }

    /// Independent child stream; does not advance `self`.
    pub fn substream(&self, id: u64) -> Self {
        CounterRng {
            key: mix64(self.key ^ mix64(id.wrapping_add(GAMMA))),
            counter: 0,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform<T: Scalar>(&mut self, lo: T, hi: T) -> T {
        lo + (hi - lo) * T::of(self.next_f64())
    }

    /// Uniform integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % n;
            }
        }
    }

    /// Standard normal deviate.
    pub fn normal<T: Scalar>(&mut self) -> T {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        T::of((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos())
    }

    /// Fisher-Yates, walking from the last element down.
    pub fn shuffle<V>(&mut self, items: &mut [V]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    pub fn to_bytes(&self) -> [u8; 16] {
        let mut out = [0u8; 16];
        out[..8].copy_from_slice(&self.key.to_le_bytes());
        out[8..].copy_from_slice(&self.counter.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        CounterRng {
            key: u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")),
            counter: u64::from_le_bytes(bytes[8..].try_into().expect("8 bytes")),
        }
    }
}
