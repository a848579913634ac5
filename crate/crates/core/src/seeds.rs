//! Labeled seed derivation. One global seed fans out to independent
//! per-stage streams: `derive(seed, "attack/rep")` never collides with
//! `derive(seed, "corpus")`.

use sha2::{Digest, Sha256};

fn finish(h: Sha256) -> u64 {
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

pub fn derive(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    finish(h)
}

pub fn derive_indexed(seed: u64, label: &str, index: u64) -> u64 {
    derive_path(seed, label, &[index])
}

pub fn derive_path(seed: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    for i in indices {
        h.update(i.to_le_bytes());
    }
    finish(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_and_indices_separate_streams() {
        assert_eq!(derive(7, "a"), derive(7, "a"));
        assert_ne!(derive(7, "a"), derive(7, "b"));
        assert_ne!(derive(7, "a"), derive(8, "a"));
        assert_ne!(derive_path(1, "q", &[0, 1]), derive_path(1, "q", &[1, 0]));
        assert_ne!(derive_indexed(1, "q", 0), derive(1, "q"));
    }
}
