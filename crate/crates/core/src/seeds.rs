//! Deterministic seed derivation. Every random choice in the pipeline is
//! driven by a ChaCha stream seeded through these helpers, so any run is
//! reproducible from the single top-level seed.

/// SplitMix64 finalizer; good avalanche, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent child seed from a base seed and a salt
/// (stream id, utterance index, epoch number, ...).
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    mix(base ^ salt.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// FNV-1a over bytes; used to fold strings (group keys, parameter paths)
/// into seed salts and digests. Not cryptographic.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Salt namespaces for the training pipeline streams.
pub mod salt {
    pub const CORPUS_TEMPLATE: u64 = 0x01_0000;
    pub const CORPUS_GROUP: u64 = 0x02_0000;
    pub const CORPUS_UTTERANCE: u64 = 0x03_0000;
    pub const SPLIT_STRATUM: u64 = 0x04_0000;
    pub const BATCH_AUGMENT: u64 = 0x05_0000;
    pub const PARAM_INIT: u64 = 0x06_0000;
    pub const EPOCH_SHUFFLE: u64 = 0x07_0000;
    pub const STEP_BATCH: u64 = 0x08_0000;
    pub const DECODER_INIT: u64 = 0x09_0000;
    pub const PROBE_SPLIT: u64 = 0x0A_0000;
}
