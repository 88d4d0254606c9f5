use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic streams derived from one user seed.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Stream {
    Split = 1,
    Baseline = 2,
    Init = 3,
    Shuffle = 4,
    Attack = 5,
    Patch = 6,
    Placement = 7,
    Perlin = 8,
    Probe = 9,
}

pub fn seeded(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
