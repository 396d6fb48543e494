use sha2::{Digest, Sha256};

/// Independent substream seed: hash of the base seed and a path of indices.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in path {
        h.update(p.to_le_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}
