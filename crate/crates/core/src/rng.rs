//! Named, reproducible random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the master
//! seed and a purpose label, so adding a consumer never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a; stable across platforms and toolchains.
fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn derive_seed(master: u64, label: &str) -> u64 {
    splitmix64(splitmix64(master) ^ label_hash(label))
}

pub fn stream(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Re-switching of parked and stale ebits after a plan change.
    Rebalance = 0,
    Generate = 1,
    Swap = 2,
}

/// Per-slot, per-phase substreams of one simulation run.
#[derive(Clone, Debug)]
pub struct SlotRng {
    key: u64,
}

impl SlotRng {
    pub fn new(master: u64) -> Self {
        SlotRng { key: derive_seed(master, "protocol") }
    }

    pub fn phase(&self, slot: u64, phase: Phase) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.key);
        rng.set_stream(slot.wrapping_mul(4).wrapping_add(phase as u64));
        rng
    }
}
