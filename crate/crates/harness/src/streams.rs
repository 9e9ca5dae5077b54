//! Schedule-independent random streams.
//!
//! Every replica pipeline draws from a ChaCha8 stream selected by the run
//! seed and a 64-bit stream id built from `(replica, stage)`, so the draws a
//! replica sees never depend on which worker runs it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Replica indices must stay below this.
pub const MAX_REPLICAS: u64 = 1 << 40;

pub fn derive_stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// `stage` in the top 24 bits, `replica` in the low 40.
#[inline]
pub fn stream_id(replica: u64, stage: u64) -> u64 {
    debug_assert!(replica < MAX_REPLICAS && stage < 1 << 24);
    (stage << 40) | replica
}

pub fn replica_stream(seed: u64, replica: u64, stage: u64) -> ChaCha8Rng {
    derive_stream(seed, stream_id(replica, stage))
}
