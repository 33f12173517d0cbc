//! Deterministic random streams keyed by a seed and a stream index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// ChaCha is counter based, so distinct stream ids give independent
/// sequences that do not depend on execution order.
pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}
