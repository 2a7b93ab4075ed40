//! Counter-based random substreams.
//!
//! Every random draw in a simulation comes from a ChaCha stream keyed by the
//! master seed and indexed by (replication, attempt, stage), so a
//! replication's data never depends on which worker produced it or on how
//! many other replications were run.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Stage {
    Covariates = 1,
    Treatment = 2,
    Outcome = 3,
    Dose = 4,
}

/// Largest attempt index that fits the stream layout.
pub const MAX_ATTEMPT: u32 = (1 << 24) - 1;

/// Stream `rep << 32 | attempt << 8 | stage`; `attempt` is masked to 24 bits.
pub fn substream(seed: u64, rep: u32, attempt: u32, stage: Stage) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    let mut rng = ChaCha12Rng::from_seed(key);
    rng.set_stream((u64::from(rep) << 32) | (u64::from(attempt & MAX_ATTEMPT) << 8) | stage as u64);
    rng
}
