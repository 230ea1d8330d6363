//! Deterministic seed derivation.
//!
//! Every stochastic component draws from a ChaCha stream seeded through
//! here, so one master seed pins the whole run bit-for-bit regardless of
//! thread count.

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed for a named domain and index.
pub fn derive(master: u64, domain: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in domain.as_bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x100000001b3);
    }
    splitmix64(splitmix64(master ^ h).wrapping_add(index))
}
