//! Master-seed fan-out.
//!
//! A sub-seed is `splitmix64(master ^ fnv1a64(name))`, optionally mixed again
//! with an integer index (`splitmix64(sub ^ index)`). Components draw from
//! `ChaCha8Rng` streams seeded this way, so each one is reproducible on its
//! own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sub_seed(master: u64, name: &str) -> u64 {
    splitmix64(master ^ fnv1a64(name.as_bytes()))
}

pub fn indexed_seed(master: u64, name: &str, index: u64) -> u64 {
    splitmix64(sub_seed(master, name) ^ index)
}

pub fn rng_for(master: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(master, name))
}

pub fn rng_indexed(master: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(indexed_seed(master, name, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_separate_streams() {
        assert_ne!(sub_seed(7, "data"), sub_seed(7, "mask"));
        assert_eq!(sub_seed(7, "data"), sub_seed(7, "data"));
        assert_ne!(indexed_seed(7, "step", 0), indexed_seed(7, "step", 1));
        // FNV-1a reference value for "a"
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
