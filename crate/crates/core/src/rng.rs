//! Reproducible random streams.
//!
//! All randomness comes from ChaCha8, a counter-based generator whose output
//! is identical on every platform. A master seed is split into independent
//! streams by selecting the ChaCha stream number: stream `k` of master seed
//! `s` is `ChaCha8Rng::seed_from_u64(s)` with `set_stream(k)`. Object `k` of
//! a phantom dataset, iteration `i` of a training run, and so on each get
//! their own stream, so results never depend on evaluation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of `master`.
pub fn stream(master: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

/// A 64-bit seed for child `k` of `master`: the first word of stream `k`.
pub fn derive_seed(master: u64, k: u64) -> u64 {
    stream(master, k).random()
}

/// Stream for a `(domain, index)` pair, e.g. one training iteration slot.
pub fn domain_stream(master: u64, domain: u64, index: u64) -> StreamRng {
    stream(derive_seed(master, domain.wrapping_add(1) << 40), index)
}
