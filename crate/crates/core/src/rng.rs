use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream for item `index` under `seed`. Streams do not depend on
/// how work is scheduled, so serial and parallel runs draw identical values.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Derives a sub-seed for a named purpose (so "train" and "attack" streams
/// under the same master seed never collide).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, folded with the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.rotate_left(17);
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed
}
