//! Counter-based random streams: every consumer derives its generator from
//! `(seed, stream id)`, so results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Packs up to four small indices into a stream id.
pub fn stream_id(parts: [u16; 4]) -> u64 {
    parts
        .iter()
        .fold(0u64, |acc, &p| (acc << 16) | p as u64)
}
