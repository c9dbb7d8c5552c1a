//! Seeded random streams.
//!
//! All sampling uses ChaCha20 (`rand_chacha::ChaCha20Rng`). A `(seed, stream)`
//! pair selects an independent keystream, so sub-tasks can draw without
//! coordinating and results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type StreamRng = ChaCha20Rng;

pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
