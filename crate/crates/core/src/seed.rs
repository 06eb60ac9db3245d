//! Named random streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Data,
    Train,
    Corrupt,
    Sample,
    ProbeNegatives,
}

impl Stream {
    pub fn label(self) -> &'static str {
        match self {
            Stream::Data => "data",
            Stream::Train => "train",
            Stream::Corrupt => "corrupt",
            Stream::Sample => "sample",
            Stream::ProbeNegatives => "probe-negatives",
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Generator for substream `index` of the named stream. Distinct
/// `(label, index)` pairs give independent sequences.
pub fn stream_rng(master: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master ^ fnv1a(stream.label()));
    rng.set_stream(index);
    rng
}
