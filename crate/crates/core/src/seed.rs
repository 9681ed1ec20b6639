//! Deterministic expansion of one user seed into independent per-subsystem streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Root seed that hands out child seeds keyed by a subsystem label.
///
/// Child seeds are a pure function of `(root, label)`, so adding a new
/// consumer never perturbs the streams of existing ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedSplitter {
    root: u64,
}

impl SeedSplitter {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn child_seed(&self, label: &str) -> u64 {
        splitmix64(self.root ^ splitmix64(fnv1a(label.as_bytes())))
    }

    /// A splitter rooted at the child seed for `label`.
    pub fn child(&self, label: &str) -> SeedSplitter {
        SeedSplitter::new(self.child_seed(label))
    }

    pub fn rng(&self, label: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.child_seed(label))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
