//! Seeded random streams. Every random draw in the crate comes from a
//! ChaCha stream selected by `(seed, name)`, so adding or removing one
//! consumer never shifts the numbers another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const MASK: &str = "mask";
pub const DROPOUT: &str = "dropout";
pub const SPLIT: &str = "split";
pub const SYNTHETIC: &str = "synthetic";

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// The stream named `name` under `seed`.
pub fn stream(seed: u64, name: &str) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}
