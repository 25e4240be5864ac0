//! Stable seed derivation. Every seeded RNG in the crate is a ChaCha8
//! stream keyed by a value mixed here, so item N of any stream can be
//! reproduced without generating items 0..N.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Incremental mixer over integers and strings.
#[derive(Debug, Clone, Copy)]
pub struct SeedMixer(u64);

impl SeedMixer {
    pub fn new(seed: u64) -> Self {
        Self(splitmix64(seed ^ FNV_OFFSET))
    }

    pub fn u64(self, v: u64) -> Self {
        Self(splitmix64(self.0 ^ splitmix64(v)))
    }

    pub fn str(self, s: &str) -> Self {
        let mut h = FNV_OFFSET;
        for b in s.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(FNV_PRIME);
        }
        // length separates ("ab","c") from ("a","bc")
        self.u64(h).u64(s.len() as u64)
    }

    pub fn finish(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_sensitive() {
        let a = SeedMixer::new(7).u64(1).str("x").finish();
        assert_eq!(a, SeedMixer::new(7).u64(1).str("x").finish());
        assert_ne!(a, SeedMixer::new(7).u64(2).str("x").finish());
        assert_ne!(a, SeedMixer::new(8).u64(1).str("x").finish());
        assert_ne!(
            SeedMixer::new(0).str("ab").str("c").finish(),
            SeedMixer::new(0).str("a").str("bc").finish()
        );
    }

    #[test]
    fn frozen_value() {
        // Pinned so seeded artifacts stay reproducible across releases.
        assert_eq!(SeedMixer::new(0).finish(), 14_087_677_454_934_409_008);
        assert_eq!(SeedMixer::new(42).u64(7).str("abc").finish(), 2_192_926_377_169_225_302);
    }
}
