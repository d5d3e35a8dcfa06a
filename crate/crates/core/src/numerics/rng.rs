//! Seeded randomness. Every random draw in the crate comes from a ChaCha8
//! stream keyed by the run seed plus a purpose-specific stream id, so
//! independent consumers never perturb each other's sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids for the independent consumers of one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Mask = 3,
    Crop = 4,
    SpecAugment = 5,
    Caption = 6,
    Fusion = 7,
    Synth = 8,
}

pub fn seeded(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = seeded(7, Stream::Mask).gen();
        let b: u64 = seeded(7, Stream::Mask).gen();
        let c: u64 = seeded(7, Stream::Crop).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
