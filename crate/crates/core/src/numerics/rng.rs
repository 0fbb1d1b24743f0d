use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seed plus a labelled stream splitter.
///
/// Every consumer draws from its own ChaCha8 stream, selected by hashing a
/// label, so adding a draw in one place never shifts the numbers seen by
/// another. ChaCha is counter based, which makes streams identical across
/// platforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
}

impl RngState {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn stream(&self, label: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(label.as_bytes()));
        rng
    }

    /// Stream for a label plus an integer index (epochs, seeds in a sweep, ...).
    pub fn indexed_stream(&self, label: &str, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(fnv1a(label.as_bytes()));
        rng
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
