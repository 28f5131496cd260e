//! Stable 64-bit hashing (FNV-1a).
//!
//! Mock backends, vocabulary fingerprints, and synthetic data all need hashes
//! that are identical across runs, platforms, and compiler versions, which
//! rules out `std::hash`. FNV-1a is enough: these hashes pick deterministic
//! pseudo-random behaviour, they are not security boundaries.

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// Incremental FNV-1a hasher.
#[derive(Debug, Clone, Copy)]
pub struct Fnv64(u64);

impl Fnv64 {
    pub fn new() -> Self {
        Fnv64(FNV_OFFSET)
    }

    /// Starts from a previous hash value so streams can be chained.
    pub fn with_seed(seed: u64) -> Self {
        Fnv64(FNV_OFFSET ^ seed)
    }

    pub fn write(mut self, bytes: &[u8]) -> Self {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
        self
    }

    pub fn write_str(self, s: &str) -> Self {
        // A length prefix keeps ("ab","c") and ("a","bc") distinct.
        self.write(&(s.len() as u64).to_le_bytes()).write(s.as_bytes())
    }

    pub fn write_u64(self, v: u64) -> Self {
        self.write(&v.to_le_bytes())
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}

/// Hash of a list of strings, order-sensitive.
pub fn hash_strs<S: AsRef<str>>(items: &[S]) -> u64 {
    let mut h = Fnv64::new();
    for s in items {
        h = h.write_str(s.as_ref());
    }
    h.finish()
}

/// Lowercase hex rendering used in file headers.
pub fn hex64(v: u64) -> String {
    format!("{v:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_vector() {
        // FNV-1a of the empty string is the offset basis.
        assert_eq!(Fnv64::new().finish(), FNV_OFFSET);
        // Published FNV-1a test vector for "a".
        assert_eq!(Fnv64::new().write(b"a").finish(), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn length_prefix_separates_boundaries() {
        let ab_c = Fnv64::new().write_str("ab").write_str("c").finish();
        let a_bc = Fnv64::new().write_str("a").write_str("bc").finish();
        assert_ne!(ab_c, a_bc);
    }

    #[test]
    fn hex_is_fixed_width() {
        assert_eq!(hex64(0xff), "00000000000000ff");
    }
}
