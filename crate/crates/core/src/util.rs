//! Small deterministic helpers shared across modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a. Stable across platforms and toolchains, unlike `DefaultHasher`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_extend(FNV_OFFSET, bytes)
}

pub fn fnv1a64_extend(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Derives an independent stream seed from a base seed and a tag.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    fnv1a64_extend(fnv1a64(&seed.to_le_bytes()), tag.as_bytes())
}

pub fn rng_for(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

/// Checksum over the exact bit patterns of a parameter list.
pub fn checksum<'a>(tensors: impl IntoIterator<Item = &'a [f64]>) -> u64 {
    let mut h = FNV_OFFSET;
    for t in tensors {
        h = fnv1a64_extend(h, &(t.len() as u64).to_le_bytes());
        for v in t {
            h = fnv1a64_extend(h, &v.to_bits().to_le_bytes());
        }
    }
    h
}
