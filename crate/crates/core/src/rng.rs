//! Seeded RNG streams.
//!
//! Every random decision in the pipeline draws from a ChaCha stream derived
//! from `(master seed, purpose, index)`. Independent stages therefore never
//! share randomness, and adding draws to one stage cannot perturb another —
//! which is what makes the corpus, teacher traces, sampling and pairing all
//! reproducible bit-for-bit from a single config seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Purpose tags for derived streams. The numeric values are part of the
/// checkpoint/artifact reproducibility contract; do not reorder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    ParamInit = 1,
    CorpusGen = 2,
    TeacherTrace = 3,
    TeacherNoise = 4,
    SftShuffle = 5,
    Stage2Sampling = 6,
    Pairing = 7,
    DpoShuffle = 8,
    InstructionShuffle = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic sub-seed for `(seed, purpose, index)`.
pub fn derive_seed(seed: u64, purpose: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ (purpose as u64).wrapping_mul(0xa076_1d64_78bd_642f)) ^ index)
}

/// RNG for one `(seed, purpose, index)` stream.
pub fn stream_rng(seed: u64, purpose: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, index))
}

/// Serializable snapshot of a ChaCha stream, stored in checkpoints so a run
/// can be resumed (or audited) without replaying the draws that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
