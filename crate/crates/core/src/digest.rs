//! Content digests for configs and checkpoints.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Hex SHA-256 of the value's canonical JSON encoding.
pub fn config_digest<T: Serialize>(value: &T) -> Result<String> {
    Ok(bytes_digest(&serde_json::to_vec(value)?))
}

/// Hex SHA-256 of raw bytes.
pub fn bytes_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = config_digest(&vec![1.0, 2.0]).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, config_digest(&vec![1.0, 2.0]).unwrap());
        assert_ne!(a, config_digest(&vec![1.0, 2.5]).unwrap());
    }
}
