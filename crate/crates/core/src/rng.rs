//! Seed derivation. Every random stream in the simulator is a ChaCha8 generator
//! keyed by a hash of the experiment seed and a tuple of stream coordinates, so
//! results never depend on call order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep unrelated consumers of the same `(seed, round, ...)`
/// coordinates apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    LocalTrain = 2,
    Partition = 3,
    Sampling = 4,
    AttackSplit = 5,
    AttackTrain = 6,
    Dnc = 7,
    BaseModel = 8,
    Synth = 9,
    Power = 10,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a seed with a stream tag and coordinates into a single 64-bit seed.
pub fn derive(seed: u64, stream: Stream, coords: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ splitmix(stream as u64));
    for &c in coords {
        h = splitmix(h ^ c.wrapping_mul(0x2545_f491_4f6c_dd1d));
    }
    h
}

pub fn stream(seed: u64, stream: Stream, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, coords))
}
