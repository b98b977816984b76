//! Seed derivation for independent, reproducible random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Purpose of a stream derived from a run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Noise,
    Fallback,
    Training,
    Other(u64),
}

impl Stream {
    fn tag(self) -> (u8, u64) {
        match self {
            Stream::Init => (1, 0),
            Stream::Noise => (2, 0),
            Stream::Fallback => (3, 0),
            Stream::Training => (4, 0),
            Stream::Other(x) => (5, x),
        }
    }
}

/// A 64-bit seed for `(seed, chain, stream)`; distinct inputs give unrelated seeds.
pub fn derive_seed(seed: u64, chain: u64, stream: Stream) -> u64 {
    let (kind, extra) = stream.tag();
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(chain.to_le_bytes());
    h.update([kind]);
    h.update(extra.to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest has 32 bytes"))
}

pub fn stream_rng(seed: u64, chain: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, chain, stream))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_distinct_and_stable() {
        let a = derive_seed(7, 0, Stream::Init);
        assert_eq!(a, derive_seed(7, 0, Stream::Init));
        assert_ne!(a, derive_seed(7, 0, Stream::Noise));
        assert_ne!(a, derive_seed(7, 1, Stream::Init));
        assert_ne!(a, derive_seed(8, 0, Stream::Init));
        let x: u64 = stream_rng(1, 2, Stream::Other(3)).random();
        let y: u64 = stream_rng(1, 2, Stream::Other(3)).random();
        assert_eq!(x, y);
    }
}
