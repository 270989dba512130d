//! Content hashes used for image identities, prompt versions and cache keys.

use serde_json::Value;
use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of raw bytes.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Hash of a JSON value in canonical form.
///
/// `serde_json::Map` is ordered by key, so serializing a `Value` gives a
/// stable byte string for logically equal payloads.
pub fn canonical_hash(value: &Value) -> String {
    sha256_hex(value.to_string())
}
