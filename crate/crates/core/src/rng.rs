use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The one RNG type used throughout; seeded streams make every run replayable.
pub type SeededRng = ChaCha8Rng;

/// Independent stream for a `(seed, path...)` pair, e.g. `(seed, [example, span])`.
pub fn stream(seed: u64, path: &[u64]) -> SeededRng {
    let mut h = splitmix(seed ^ 0x1d8e_4e27_c47d_124f);
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    SeededRng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
