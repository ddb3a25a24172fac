//! Seeded random streams.
//!
//! Every stochastic component draws from a ChaCha8 stream keyed by the run
//! seed and a purpose tag, with the stream index selecting e.g. the chain.
//! ChaCha is counter based, so a stream's position can be saved and restored
//! exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const NEGATIVE_CHAINS: u64 = 1;
pub const POSITIVE_CHAINS: u64 = 2;
pub const SHUFFLE: u64 = 3;
pub const INIT: u64 = 4;
pub const AIS: u64 = 5;
pub const DATA: u64 = 6;

pub fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&purpose.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}
