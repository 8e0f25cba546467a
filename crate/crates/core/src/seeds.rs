//! Deterministic random streams derived from one user seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent ChaCha stream `stream` under `seed`. Tasks that may run in
/// parallel each take their own stream so results do not depend on scheduling.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
